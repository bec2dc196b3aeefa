//! Evaluation: the feature extractor, the metrics, and the repeated-run
//! protocol producing a [`MetricReport`].

pub mod extractor;
pub mod metrics;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use extractor::{contrastive_loss, cosine_margin, train_extractor, ExtractorArch, ExtractorTrainConfig, FeatureExtractor};
pub use metrics::{diversity, fid, mm_dist, multimodality, r_precision, GaussianStats};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::motion::MotionFeatures;
use crate::pipeline::{Dataset, Stack};
use crate::rng;

/// Mean with the half-width of a normal-approximation 95% interval; the
/// interval is `None` for a single run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: Option<f64>,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci95 = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        });
        Self { mean, ci95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub fid: f64,
    pub r_precision: [f64; 3],
    pub mm_dist: f64,
    pub diversity: f64,
    pub multimodality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub run_count: usize,
    pub fid: MeanCi,
    pub r_top1: MeanCi,
    pub r_top2: MeanCi,
    pub r_top3: MeanCi,
    pub mm_dist: MeanCi,
    pub diversity: MeanCi,
    pub multimodality: Option<MeanCi>,
    pub runs: Vec<RunMetrics>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl MetricReport {
    pub fn from_runs(label: impl Into<String>, runs: Vec<RunMetrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidArgument("a report needs at least one run".into()));
        }
        let col = |f: &dyn Fn(&RunMetrics) -> f64| MeanCi::of(&runs.iter().map(f).collect::<Vec<_>>());
        let mm: Option<Vec<f64>> = runs.iter().map(|r| r.multimodality).collect();
        Ok(Self {
            label: label.into(),
            run_count: runs.len(),
            fid: col(&|r| r.fid),
            r_top1: col(&|r| r.r_precision[0]),
            r_top2: col(&|r| r.r_precision[1]),
            r_top3: col(&|r| r.r_precision[2]),
            mm_dist: col(&|r| r.mm_dist),
            diversity: col(&|r| r.diversity),
            multimodality: mm.map(|v| MeanCi::of(&v)),
            runs,
        })
    }

    pub fn median_fid(&self) -> f64 {
        median(&mut self.runs.iter().map(|r| r.fid).collect::<Vec<_>>())
    }

    pub fn median_diversity(&self) -> f64 {
        median(&mut self.runs.iter().map(|r| r.diversity).collect::<Vec<_>>())
    }

    fn columns(&self) -> [(&'static str, Option<MeanCi>); 7] {
        [
            ("fid", Some(self.fid)),
            ("r_top1", Some(self.r_top1)),
            ("r_top2", Some(self.r_top2)),
            ("r_top3", Some(self.r_top3)),
            ("mm_dist", Some(self.mm_dist)),
            ("diversity", Some(self.diversity)),
            ("multimodality", self.multimodality),
        ]
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

/// One CSV row per report; columns follow the usual table order, each metric
/// followed by its interval half-width (empty when absent).
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string(), "runs".to_string()];
    if let Some(r) = reports.first() {
        for (name, _) in r.columns() {
            header.push(name.to_string());
            header.push(format!("{name}_ci95"));
        }
    }
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.label.clone(), r.run_count.to_string()];
        for (_, v) in r.columns() {
            match v {
                Some(m) => {
                    row.push(fmt_value(m.mean));
                    row.push(m.ci95.map(fmt_value).unwrap_or_default());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table of the reports.
pub fn format_table(reports: &[MetricReport]) -> String {
    let names = ["FID", "R-top1", "R-top2", "R-top3", "MMdist", "Diversity", "MModality"];
    let mut s = format!("{:<16}", "method");
    for n in names {
        s.push_str(&format!("{n:>20}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{:<16}", r.label));
        for (_, v) in r.columns() {
            let cell = match v {
                Some(MeanCi { mean, ci95: Some(ci) }) => format!("{mean:.4} ±{ci:.4}"),
                Some(MeanCi { mean, ci95: None }) => format!("{mean:.4}"),
                None => "-".to_string(),
            };
            s.push_str(&format!("{cell:>20}"));
        }
        s.push('\n');
    }
    s
}

/// Real-data side of every evaluation: test-split statistics and text
/// features.
#[derive(Clone, Debug)]
pub struct EvalReference {
    pub real: GaussianStats,
    pub text: Tensor2,
    pub caption_ids: Vec<usize>,
    pub frames: Vec<usize>,
    pub conds: Tensor2,
    pub real_features: Tensor2,
}

impl EvalReference {
    pub fn new(stack: &Stack, data: &Dataset) -> Result<Self> {
        let ext = stack.extractor()?;
        let refs: Vec<&Tensor2> = data.test.iter().map(|m| &m.data).collect();
        let real_features = ext.motion_features(&refs)?;
        Ok(Self {
            real: GaussianStats::fit(&real_features)?,
            text: ext.text_features(&data.test_captions)?,
            caption_ids: data.test_caption_ids.clone(),
            frames: data.test.iter().map(|m| m.frames()).collect(),
            conds: data.test_captions.clone(),
            real_features,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub guidance: f64,
    pub repeats: usize,
    pub seed: u64,
    /// Captions sampled for multimodality; 0 skips the metric.
    pub mm_captions: usize,
    pub mm_times: usize,
    pub literal_mm_dist: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            guidance: 7.5,
            repeats: 5,
            seed: 1,
            mm_captions: metrics::MM_CAPTIONS,
            mm_times: metrics::MM_TIMES,
            literal_mm_dist: false,
        }
    }
}

/// FID, R-precision, MMdist and diversity of one generated set.
pub fn score(reference: &EvalReference, generated: &Tensor2, seed: u64, literal_mm_dist: bool) -> Result<RunMetrics> {
    let gen = GaussianStats::fit(generated)?;
    Ok(RunMetrics {
        fid: fid(&reference.real, &gen)?,
        r_precision: r_precision(generated, &reference.text, &reference.caption_ids, metrics::R_PRECISION_POOL, seed)?,
        mm_dist: mm_dist(generated, &reference.text, literal_mm_dist)?,
        diversity: diversity(generated, metrics::diversity_times(generated.rows()), seed)?,
        multimodality: None,
    })
}

fn features_of(stack: &Stack, motions: &[MotionFeatures]) -> Result<Tensor2> {
    let refs: Vec<&Tensor2> = motions.iter().map(|m| &m.data).collect();
    stack.extractor()?.motion_features(&refs)
}

fn run_seed(seed: u64, repeat: usize, item: usize) -> u64 {
    rng::derive_key(seed, &[repeat as u64, item as u64])
}

/// Evaluates several decode variants of the same sampled latents; variant
/// `(label, realign)` yields one report.
pub fn evaluate_variants(
    stack: &Stack,
    data: &Dataset,
    opts: &EvalOptions,
    variants: &[(String, bool)],
) -> Result<Vec<MetricReport>> {
    if opts.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    stack.require(crate::pipeline::Stage::Diffusion)?;
    let reference = EvalReference::new(stack, data)?;
    let n = reference.frames.len();
    let mut runs: Vec<Vec<RunMetrics>> = vec![Vec::new(); variants.len()];
    for rep in 0..opts.repeats {
        let seeds: Vec<u64> = (0..n).map(|i| run_seed(opts.seed, rep, i)).collect();
        let z = stack.sample(&reference.conds, &seeds, opts.guidance)?;
        let mm_latents = if opts.mm_captions > 0 {
            Some(mm_sample(stack, &reference, opts, rep)?)
        } else {
            None
        };
        for (k, (_, realign)) in variants.iter().enumerate() {
            let motions = stack.decode(&z, &reference.frames, *realign)?;
            let feats = features_of(stack, &motions)?;
            let mut m = score(&reference, &feats, run_seed(opts.seed, rep, usize::MAX), opts.literal_mm_dist)?;
            if let Some((zs, frames, groups)) = &mm_latents {
                let motions = stack.decode(zs, frames, *realign)?;
                let feats = features_of(stack, &motions)?;
                let sets: Vec<Tensor2> = groups
                    .iter()
                    .map(|rows| Tensor2::from_fn(rows.len(), feats.cols(), |r, c| feats.get(rows[r], c)))
                    .collect();
                m.multimodality = Some(multimodality(&sets, sets.len(), opts.mm_times, run_seed(opts.seed, rep, usize::MAX - 1))?);
            }
            runs[k].push(m);
        }
    }
    variants
        .iter()
        .zip(runs)
        .map(|((label, _), r)| MetricReport::from_runs(label.clone(), r))
        .collect()
}

type MmSample = (Tensor2, Vec<usize>, Vec<Vec<usize>>);

/// Latents for multimodality: `2 * mm_times` samples for each of up to
/// `mm_captions` seeded distinct test captions.
fn mm_sample(stack: &Stack, reference: &EvalReference, opts: &EvalOptions, rep: usize) -> Result<MmSample> {
    let mut firsts: Vec<usize> = Vec::new();
    for (i, &c) in reference.caption_ids.iter().enumerate() {
        if !firsts.iter().any(|&j| reference.caption_ids[j] == c) {
            firsts.push(i);
        }
    }
    let mut r = rng::stream(opts.seed, &[0x3D, rep as u64]);
    rng::shuffle(&mut r, &mut firsts);
    firsts.truncate(opts.mm_captions.min(firsts.len()));
    let per = 2 * opts.mm_times;
    let rows = firsts.len() * per;
    let cols = reference.conds.cols();
    let conds = Tensor2::from_fn(rows, cols, |r, c| reference.conds.get(firsts[r / per], c));
    let seeds: Vec<u64> = (0..rows).map(|k| run_seed(opts.seed ^ 0x6d6d, rep, k)).collect();
    let frames: Vec<usize> = (0..rows).map(|k| reference.frames[firsts[k / per]]).collect();
    let z = stack.sample(&conds, &seeds, opts.guidance)?;
    let groups = (0..firsts.len()).map(|j| (j * per..(j + 1) * per).collect()).collect();
    Ok((z, frames, groups))
}

pub fn evaluate(stack: &Stack, data: &Dataset, realign: bool, opts: &EvalOptions) -> Result<MetricReport> {
    let label = if realign { "realign" } else { "no_realign" };
    Ok(evaluate_variants(stack, data, opts, &[(label.to_string(), realign)])?.remove(0))
}

/// Scores the real test motions as if they were generated.
pub fn evaluate_ground_truth(stack: &Stack, data: &Dataset, opts: &EvalOptions) -> Result<MetricReport> {
    let reference = EvalReference::new(stack, data)?;
    let runs = (0..opts.repeats.max(1))
        .map(|rep| {
            score(
                &reference,
                &reference.real_features,
                run_seed(opts.seed, rep, usize::MAX),
                opts.literal_mm_dist,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_runs("real", runs)
}
