//! `latmo`: staged training, generation, inversion, evaluation, ablations and
//! feature export over a single checkpoint file.

mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use latmo::corpus::{Corpus, Style};
use latmo::diffusion::Sampler;
use latmo::evalkit::{self, EvalOptions, MetricReport};
use latmo::motion::{decode_features, read_raw_csv, write_features_csv, write_raw_csv, encode_features, MotionFeatures};
use latmo::mti::{generate_with_token, invert_motion, InversionConfig, LossSpace, PlaceholderToken};
use latmo::pipeline::{Dataset, PipelineConfig, Stack, Stage};
use latmo::projector::{alignment_report, Ablation};
use latmo::{checkpoint, config};

#[derive(Parser)]
#[command(name = "latmo", version, about = "Text-to-motion latent diffusion with latent realignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and append it to the checkpoint.
    Train(TrainArgs),
    /// Generate a motion for a caption.
    Generate(GenerateArgs),
    /// Learn a placeholder word from an exemplar motion.
    Invert(InvertArgs),
    /// Evaluate generation with and without realignment.
    Evaluate(EvaluateArgs),
    /// Retrain the projector without each loss term and compare.
    Ablate(AblateArgs),
    /// Write per-item latents or features of a split to CSV.
    ExportFeatures(ExportArgs),
    /// Print the documented default configuration.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Vae,
    Diffusion,
    Projector,
    Extractor,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Vae => Stage::Vae,
            StageArg::Diffusion => Stage::Diffusion,
            StageArg::Projector => Stage::Projector,
            StageArg::Extractor => Stage::Extractor,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to extend (created when missing).
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    caption: String,
    /// Feature frames to decode.
    #[arg(long, default_value_t = 79)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode the sampled latent directly, skipping the projector.
    #[arg(long)]
    no_realign: bool,
    #[arg(long, visible_alias = "guidance")]
    guidance_scale: Option<f64>,
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long)]
    steps: Option<usize>,
    /// Learned token file; its word may then appear in the caption.
    #[arg(long)]
    token: Option<PathBuf>,
    #[arg(long, default_value = "generated")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw motion CSV (root trajectory and local joint positions).
    #[arg(long, conflicts_with = "style")]
    exemplar: Option<PathBuf>,
    /// Use the corpus exemplar with this style instead of a file.
    #[arg(long)]
    style: Option<String>,
    #[arg(long, default_value = "walks")]
    init_word: String,
    #[arg(long, default_value = "realigned")]
    loss_space: LossSpace,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "token.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, visible_alias = "guidance")]
    guidance_scale: Option<f64>,
    /// Captions used for multimodality; 0 skips it.
    #[arg(long, default_value_t = 100)]
    mm_captions: usize,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    /// VAE latents.
    Vae,
    /// Projector embeddings.
    Projected,
    /// Evaluation-extractor motion features.
    Extractor,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "projected")]
    space: Space,
    #[arg(long, default_value = "features.csv")]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Invert(a) => invert(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportFeatures(a) => export(a),
        Command::Defaults => {
            print!("{}", config::defaults_file()?);
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let text = path
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    Ok(config::load(text.as_deref(), std::env::vars())?)
}

/// Opens a checkpoint and rebuilds its corpus and dataset.
fn open(path: &Path) -> Result<(Stack, Corpus, Dataset)> {
    let stack = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (_, corpus) = Stack::init(stack.config.clone())?;
    let data = stack.dataset(&corpus)?;
    Ok((stack, corpus, data))
}

fn stage_hashes(stack: &Stack) -> Vec<(Stage, String)> {
    let mut out = Vec::new();
    if let Some(v) = &stack.vae {
        out.push((Stage::Vae, v.params.hash()));
    }
    if let Some(d) = &stack.denoiser {
        out.push((Stage::Diffusion, d.params.hash()));
    }
    if let Some(p) = &stack.projector {
        out.push((Stage::Projector, p.params.hash()));
    }
    if let Some(e) = &stack.extractor {
        out.push((Stage::Extractor, e.params.hash()));
    }
    out
}

fn write_log<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stage = Stage::from(a.stage);
    let requested = a.config.as_deref().map(|p| load_config(Some(p))).transpose()?;
    let (mut stack, corpus) = if a.checkpoint.exists() {
        let existing = checkpoint::load(&a.checkpoint)?;
        if let Some(cfg) = &requested {
            if *cfg != existing.config {
                bail!(
                    "{} was trained with a different configuration; use a new checkpoint path",
                    a.checkpoint.display()
                );
            }
        }
        let (_, corpus) = Stack::init(existing.config.clone())?;
        (existing, corpus)
    } else {
        let cfg = match requested {
            Some(c) => c,
            None => load_config(None)?,
        };
        Stack::init(cfg)?
    };
    for p in stage.prerequisites() {
        if !stack.has(*p) {
            bail!("stage `{}` needs `{}`; train it first", stage.name(), p.name());
        }
    }
    let data = stack.dataset(&corpus)?;
    let frozen: Vec<(Stage, String)> = stage_hashes(&stack).into_iter().filter(|(s, _)| *s != stage).collect();
    stack.train_stage(stage, &data)?;
    let after = stage_hashes(&stack);
    for (s, h) in &frozen {
        if !after.contains(&(*s, h.clone())) {
            bail!("stage `{}` changed while training `{}`", s.name(), stage.name());
        }
    }
    checkpoint::save(&stack, &a.checkpoint)?;
    let log_path = a.checkpoint.with_extension(format!("{}.log.csv", stage.name()));
    match stage {
        Stage::Vae => write_log(&log_path, &stack.logs.vae)?,
        Stage::Diffusion => write_log(&log_path, &stack.logs.diffusion)?,
        Stage::Projector => write_log(&log_path, &stack.logs.projector)?,
        Stage::Extractor => write_log(&log_path, &stack.logs.extractor)?,
    }
    println!("trained {} -> {} (log {})", stage.name(), a.checkpoint.display(), log_path.display());
    Ok(())
}

fn write_motion(stack: &Stack, f: &MotionFeatures, dir: &Path, title: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let denorm = stack.denormalize(f)?;
    let joints = stack.skeleton.joint_count();
    write_features_csv(&denorm, joints, BufWriter::new(File::create(dir.join("features.csv"))?))?;
    let raw = decode_features(&denorm, &stack.skeleton, Default::default(), stack.config.corpus.fps)?;
    write_raw_csv(&raw, BufWriter::new(File::create(dir.join("joints.csv"))?))?;
    std::fs::write(dir.join("motion.svg"), svg::render(&raw, &stack.skeleton, title))?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut stack = checkpoint::load(&a.checkpoint)?;
    for st in [Stage::Vae, Stage::Diffusion] {
        stack.require(st)?;
    }
    if !a.no_realign {
        stack.require(Stage::Projector).context("realignment needs the projector (or pass --no-realign)")?;
    }
    if let Some(s) = a.sampler {
        stack.config.sampler = s;
    }
    if let Some(n) = a.steps {
        stack.schedule = stack.schedule.clone().with_inference_steps(n)?;
    }
    let arch = &stack.vae()?.arch;
    if a.length < arch.min_frames || a.length > arch.max_frames {
        bail!("length must be within {}..={} frames", arch.min_frames, arch.max_frames);
    }
    let guidance = a.guidance_scale.unwrap_or(stack.config.guidance);
    let realign = !a.no_realign;
    let motion = match &a.token {
        Some(path) => {
            let token = PlaceholderToken::load(path)?;
            let tokens = stack.vocab.tokenize(&a.caption);
            let c = stack.vocab.embed_tokens(&tokens, Some(&token.embedding))?;
            let z = stack.sample(&c.to_row(), &[a.seed], guidance)?;
            stack.decode(&z, &[a.length], realign)?.remove(0)
        }
        None => stack.generate(&a.caption, a.length, a.seed, realign, guidance)?,
    };
    let title = format!("{} (seed {}, {})", a.caption, a.seed, if realign { "realigned" } else { "raw" });
    write_motion(&stack, &motion, &a.out_dir, &title)?;
    println!("wrote {} frames to {}", motion.frames(), a.out_dir.display());
    Ok(())
}

fn invert(a: InvertArgs) -> Result<()> {
    let (stack, corpus, _) = open(&a.checkpoint)?;
    let raw = match (&a.exemplar, &a.style) {
        (Some(p), None) => read_raw_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        (None, Some(name)) => {
            let style = Style::ALL
                .into_iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| anyhow!("unknown style `{name}`"))?;
            corpus
                .exemplars
                .iter()
                .find(|e| e.spec.style == Some(style))
                .ok_or_else(|| anyhow!("corpus has no `{name}` exemplar"))?
                .motion
                .clone()
        }
        _ => bail!("pass exactly one of --exemplar or --style"),
    };
    let feats = encode_features(&raw, &stack.skeleton, stack.contact_threshold())?;
    let feats = stack.norm.apply(&feats)?;
    let cfg = InversionConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        loss_space: a.loss_space,
        apply_realign_at_generation: a.loss_space == LossSpace::Realigned,
    };
    let res = invert_motion(&stack, &[feats], &a.init_word, &cfg, a.seed)?;
    res.token.save(&a.out)?;
    for (i, l) in res.trace.iter().enumerate() {
        println!("step {:>3}  loss {l:.6}", i + 1);
    }
    println!(
        "probe loss {:.6} -> {:.6}; token `{}` saved to {}",
        res.probe_initial,
        res.probe_final,
        res.token.word,
        a.out.display()
    );
    let sample = generate_with_token(&stack, &res.token, 0, 79, stack.config.guidance, a.seed, cfg.apply_realign_at_generation);
    if let Ok(m) = sample {
        let dir = a.out.with_extension("preview");
        write_motion(&stack, &m, &dir, "learned token preview")?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (stack, _, data) = open(&a.checkpoint)?;
    let opts = EvalOptions {
        guidance: a.guidance_scale.unwrap_or(stack.config.guidance),
        repeats: a.repeats,
        seed: a.seed,
        mm_captions: a.mm_captions,
        ..EvalOptions::default()
    };
    let mut reports = evalkit::evaluate_variants(
        &stack,
        &data,
        &opts,
        &[("realign".to_string(), true), ("no_realign".to_string(), false)],
    )?;
    reports.push(evalkit::evaluate_ground_truth(&stack, &data, &opts)?);
    evalkit::write_reports_csv(&reports, BufWriter::new(File::create(&a.out)?))?;
    print!("{}", evalkit::format_table(&reports));
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (mut stack, _, data) = open(&a.checkpoint)?;
    for st in [Stage::Vae, Stage::Diffusion, Stage::Extractor] {
        stack.require(st)?;
    }
    let opts = EvalOptions {
        guidance: stack.config.guidance,
        repeats: a.repeats,
        seed: a.seed,
        mm_captions: 0,
        ..EvalOptions::default()
    };
    let test_latents = stack.latents_of(&data.test)?;
    let mut variants: Vec<(String, Option<Ablation>)> = vec![("full".into(), None)];
    variants.extend(Ablation::ALL.into_iter().map(|x| (x.label().to_string(), Some(x))));
    let mut rows: Vec<(MetricReport, f64, f64)> = Vec::new();
    for (label, abl) in variants {
        let mut cfg = stack.config.projector_train.clone();
        cfg.ablation.clear();
        cfg.ablation.extend(abl);
        log::info!("projector variant {label}");
        let (p, _) = stack.fit_projector(&data, &cfg)?;
        let rep = alignment_report(&p, &test_latents, &data.test_captions, &data.test_caption_ids)?;
        stack.projector = Some(p);
        let mut r = evalkit::evaluate_variants(&stack, &data, &opts, &[(label, true)])?.remove(0);
        r.multimodality = None;
        rows.push((r, rep.margin, rep.rel_rec_error));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&a.out)?));
    w.write_record([
        "variant", "fid_median", "fid", "r_top1", "r_top2", "r_top3", "mm_dist", "diversity", "align_margin",
        "rel_rec_error",
    ])?;
    for (r, margin, rec) in &rows {
        let f = |x: f64| format!("{x:.6}");
        w.write_record([
            r.label.clone(),
            f(r.median_fid()),
            f(r.fid.mean),
            f(r.r_top1.mean),
            f(r.r_top2.mean),
            f(r.r_top3.mean),
            f(r.mm_dist.mean),
            f(r.diversity.mean),
            f(*margin),
            f(*rec),
        ])?;
    }
    w.flush()?;
    let reports: Vec<MetricReport> = rows.into_iter().map(|(r, _, _)| r).collect();
    print!("{}", evalkit::format_table(&reports));
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let (stack, _, data) = open(&a.checkpoint)?;
    let (motions, ids) = match a.split {
        Split::Train => (&data.train, &data.train_caption_ids),
        Split::Test => (&data.test, &data.test_caption_ids),
    };
    let feats = match a.space {
        Space::Vae => stack.latents_of(motions)?,
        Space::Projected => stack.projector()?.project(&stack.latents_of(motions)?)?,
        Space::Extractor => {
            let refs: Vec<_> = motions.iter().map(|m| &m.data).collect();
            stack.extractor()?.motion_features(&refs)?
        }
    };
    let mut w = BufWriter::new(File::create(&a.out)?);
    let header: Vec<String> = (0..feats.cols()).map(|c| format!("f{c}")).collect();
    writeln!(w, "item,caption_id,{}", header.join(","))?;
    for r in 0..feats.rows() {
        let vals: Vec<String> = feats.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{r},{},{}", ids[r], vals.join(","))?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", feats.rows(), a.out.display());
    Ok(())
}
