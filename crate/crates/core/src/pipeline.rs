//! The staged model stack: corpus preparation, the three training stages,
//! the extractor, and text-to-motion generation with optional realignment.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, Corpus, CorpusConfig};
use crate::diffcore::Tensor2;
use crate::diffusion::{
    build_schedule, sample_latents, train_diffusion, Denoiser, DenoiserArch, DiffusionLogRow,
    DiffusionTrainConfig, NoiseSchedule, Sampler, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::evalkit::extractor::{
    train_extractor, ExtractorArch, ExtractorLogRow, ExtractorTrainConfig, FeatureExtractor,
};
use crate::motion::{default_contact_threshold, encode_features, MotionFeatures, NormStats, Skeleton};
use crate::projector::{train_projector, Projector, ProjectorArch, ProjectorLogRow, ProjectorTrainConfig};
use crate::textenc::{TextEmbedding, Vocabulary};
use crate::vae::{train_vae, VaeArch, VaeLogRow, VaeModel, VaeTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(
            self.steps,
            self.beta_start,
            self.beta_end,
            ScheduleKind::Linear,
            self.inference_steps,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus_seed: u64,
    pub seed: u64,
    pub text_dim: usize,
    pub guidance: f64,
    pub sampler: Sampler,
    pub corpus: CorpusConfig,
    pub vae: VaeArch,
    pub vae_train: VaeTrainConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserArch,
    pub diffusion_train: DiffusionTrainConfig,
    pub projector: ProjectorArch,
    pub projector_train: ProjectorTrainConfig,
    pub extractor: ExtractorArch,
    pub extractor_train: ExtractorTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            corpus_seed: 0,
            seed: 0,
            text_dim: 64,
            guidance: 7.5,
            sampler: Sampler::DdimDeterministic,
            corpus: CorpusConfig::default(),
            vae: VaeArch::default(),
            vae_train: VaeTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserArch::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            projector: ProjectorArch::default(),
            projector_train: ProjectorTrainConfig::default(),
            extractor: ExtractorArch::default(),
            extractor_train: ExtractorTrainConfig::default(),
        };
        c.sync_dims();
        c
    }
}

impl PipelineConfig {
    /// Copies the dimensions that are fixed by other fields (skeleton
    /// feature size, corpus lengths, latent and text sizes) into every model.
    pub fn sync_dims(&mut self) {
        let d = Skeleton::default_seven().feature_dim();
        let min_frames = self.corpus.min_len.saturating_sub(1);
        let max_frames = self.corpus.max_len.saturating_sub(1);
        self.vae.feature_dim = d;
        self.vae.min_frames = min_frames;
        self.vae.max_frames = max_frames;
        let m = self.vae.latent_dim;
        self.denoiser.latent_dim = m;
        self.denoiser.cond_dim = self.text_dim;
        self.projector.latent_dim = m;
        self.projector.embed_dim = self.text_dim;
        self.extractor.feature_dim = d;
        self.extractor.text_dim = self.text_dim;
        self.extractor.max_frames = max_frames;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vae.validate()?;
        self.schedule.build()?;
        self.projector_train.validate()?;
        if self.text_dim == 0 {
            return Err(Error::InvalidArgument("text_dim must be positive".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidArgument("guidance must be finite".into()));
        }
        Ok(())
    }
}

/// Per-dimension affine map putting VAE latents at zero mean, unit variance
/// for the diffusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn fit(latents: &Tensor2) -> Result<Self> {
        let (n, m) = latents.shape();
        if n < 2 {
            return Err(Error::InvalidArgument("latent normalizer needs two or more latents".into()));
        }
        let mut mean = vec![0.0; m];
        for r in 0..n {
            for (a, x) in mean.iter_mut().zip(latents.row(r)) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut var = vec![0.0; m];
        for r in 0..n {
            for ((v, x), mu) in var.iter_mut().zip(latents.row(r)).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
        let mut out = Self { mean, std };
        out.round_to_f32();
        Ok(out)
    }

    pub fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub fn apply(&self, z: &Tensor2) -> Tensor2 {
        Tensor2::from_fn(z.rows(), z.cols(), |r, c| (z.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn invert(&self, z: &Tensor2) -> Tensor2 {
        Tensor2::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c) * self.std[c] + self.mean[c])
    }
}

/// Normalized features and caption embeddings for both splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<MotionFeatures>,
    pub test: Vec<MotionFeatures>,
    pub train_captions: Tensor2,
    pub test_captions: Tensor2,
    pub train_caption_ids: Vec<usize>,
    pub test_caption_ids: Vec<usize>,
    pub test_caption_text: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLogs {
    pub vae: Vec<VaeLogRow>,
    pub diffusion: Vec<DiffusionLogRow>,
    pub projector: Vec<ProjectorLogRow>,
    pub extractor: Vec<ExtractorLogRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vae,
    Diffusion,
    Projector,
    Extractor,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vae, Stage::Diffusion, Stage::Projector, Stage::Extractor];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Diffusion => "diffusion",
            Stage::Projector => "projector",
            Stage::Extractor => "extractor",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Vae | Stage::Extractor => &[],
            Stage::Diffusion => &[Stage::Vae],
            Stage::Projector => &[Stage::Vae, Stage::Diffusion],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Everything needed to generate and evaluate. Models are `None` until their
/// stage has been trained or loaded.
#[derive(Clone, Debug)]
pub struct Stack {
    pub config: PipelineConfig,
    pub skeleton: Skeleton,
    pub vocab: Vocabulary,
    pub norm: NormStats,
    pub schedule: NoiseSchedule,
    pub vae: Option<VaeModel>,
    pub latent_norm: Option<LatentNorm>,
    pub denoiser: Option<Denoiser>,
    pub projector: Option<Projector>,
    pub extractor: Option<FeatureExtractor>,
    pub logs: StageLogs,
}

fn round_vec(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Stack {
    /// Builds the corpus, the frozen text table and the feature normalizer.
    pub fn init(mut config: PipelineConfig) -> Result<(Self, Corpus)> {
        config.sync_dims();
        config.validate()?;
        let corpus = generate_corpus(&config.corpus, config.corpus_seed)?;
        let skeleton = Skeleton::default_seven();
        let vocab = Vocabulary::build(&corpus.words(), config.text_dim, config.seed)?;
        let mut table = vocab.table().clone();
        table.round_to_f32();
        let vocab = Vocabulary::from_parts(vocab.words().to_vec(), table)?;
        let thr = default_contact_threshold(config.corpus.fps);
        let train: Vec<MotionFeatures> = corpus
            .train_items()
            .map(|it| encode_features(&it.motion, &skeleton, thr))
            .collect::<Result<_>>()?;
        let mut norm = NormStats::fit(&train)?;
        round_vec(&mut norm.mean);
        round_vec(&mut norm.std);
        let schedule = config.schedule.build()?;
        let stack = Self {
            config,
            skeleton,
            vocab,
            norm,
            schedule,
            vae: None,
            latent_norm: None,
            denoiser: None,
            projector: None,
            extractor: None,
            logs: StageLogs::default(),
        };
        Ok((stack, corpus))
    }

    pub fn has(&self, stage: Stage) -> bool {
        match stage {
            Stage::Vae => self.vae.is_some(),
            Stage::Diffusion => self.denoiser.is_some() && self.latent_norm.is_some(),
            Stage::Projector => self.projector.is_some(),
            Stage::Extractor => self.extractor.is_some(),
        }
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.has(stage) {
            Ok(())
        } else {
            Err(Error::MissingStage(stage.name().to_string()))
        }
    }

    fn require_before(&self, stage: Stage) -> Result<()> {
        for &p in stage.prerequisites() {
            self.require(p)?;
        }
        Ok(())
    }

    pub fn vae(&self) -> Result<&VaeModel> {
        self.vae.as_ref().ok_or_else(|| Error::MissingStage("vae".into()))
    }

    pub fn denoiser(&self) -> Result<(&Denoiser, &LatentNorm)> {
        match (&self.denoiser, &self.latent_norm) {
            (Some(d), Some(n)) => Ok((d, n)),
            _ => Err(Error::MissingStage("diffusion".into())),
        }
    }

    pub fn projector(&self) -> Result<&Projector> {
        self.projector.as_ref().ok_or_else(|| Error::MissingStage("projector".into()))
    }

    pub fn extractor(&self) -> Result<&FeatureExtractor> {
        self.extractor.as_ref().ok_or_else(|| Error::MissingStage("extractor".into()))
    }

    pub fn contact_threshold(&self) -> f64 {
        default_contact_threshold(self.config.corpus.fps)
    }

    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let tokens = self.vocab.tokenize(caption);
        if !tokens.is_empty() && tokens.iter().all(|&t| t == crate::textenc::UNK) {
            log::warn!("caption `{caption}` has no known words; using the unknown-word embedding");
        }
        self.vocab.embed_tokens(&tokens, None)
    }

    pub fn embed_all(&self, captions: &[&str]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(captions.len(), self.config.text_dim);
        for (i, c) in captions.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.embed(c)?.as_slice());
        }
        Ok(out)
    }

    /// Normalized features of a raw corpus item.
    pub fn features_of(&self, item: &crate::corpus::CorpusItem) -> Result<MotionFeatures> {
        let f = encode_features(&item.motion, &self.skeleton, self.contact_threshold())?;
        self.norm.apply(&f)
    }

    pub fn dataset(&self, corpus: &Corpus) -> Result<Dataset> {
        let mut ids: Vec<String> = Vec::new();
        let mut caption_id = |c: &str| match ids.iter().position(|x| x == c) {
            Some(i) => i,
            None => {
                ids.push(c.to_string());
                ids.len() - 1
            }
        };
        let train: Vec<MotionFeatures> = corpus.train_items().map(|it| self.features_of(it)).collect::<Result<_>>()?;
        let test: Vec<MotionFeatures> = corpus.test_items().map(|it| self.features_of(it)).collect::<Result<_>>()?;
        let train_text: Vec<&str> = corpus.train_items().map(|it| it.caption.as_str()).collect();
        let test_text: Vec<&str> = corpus.test_items().map(|it| it.caption.as_str()).collect();
        let train_caption_ids = train_text.iter().map(|c| caption_id(c)).collect();
        let test_caption_ids = test_text.iter().map(|c| caption_id(c)).collect();
        Ok(Dataset {
            train,
            test,
            train_captions: self.embed_all(&train_text)?,
            test_captions: self.embed_all(&test_text)?,
            train_caption_ids,
            test_caption_ids,
            test_caption_text: test_text.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn train_vae_stage(&mut self, data: &Dataset) -> Result<()> {
        let mut vae = VaeModel::new(self.config.vae.clone(), self.config.seed)?;
        let log = train_vae(&mut vae, &data.train, &self.config.vae_train, self.config.seed)?;
        vae.params.round_to_f32();
        self.vae = Some(vae);
        self.logs.vae = log;
        self.denoiser = None;
        self.latent_norm = None;
        self.projector = None;
        Ok(())
    }

    /// Mean-mode VAE latents of full-length motions, `N x M`.
    pub fn latents_of(&self, motions: &[MotionFeatures]) -> Result<Tensor2> {
        let refs: Vec<&Tensor2> = motions.iter().map(|m| &m.data).collect();
        self.vae()?.encode_means(&refs)
    }

    pub fn train_diffusion_stage(&mut self, data: &Dataset) -> Result<()> {
        self.require_before(Stage::Diffusion)?;
        let latents = self.latents_of(&data.train)?;
        let norm = LatentNorm::fit(&latents)?;
        let z = norm.apply(&latents);
        let mut den = Denoiser::new(self.config.denoiser.clone(), &self.schedule, self.config.seed)?;
        let log = train_diffusion(
            &mut den,
            &z,
            &data.train_captions,
            &self.schedule,
            &self.config.diffusion_train,
            self.config.seed,
        )?;
        den.params.round_to_f32();
        self.denoiser = Some(den);
        self.latent_norm = Some(norm);
        self.logs.diffusion = log;
        self.projector = None;
        Ok(())
    }

    /// Trains a projector with `cfg` without installing it.
    pub fn fit_projector(&self, data: &Dataset, cfg: &ProjectorTrainConfig) -> Result<(Projector, Vec<ProjectorLogRow>)> {
        self.require_before(Stage::Projector)?;
        let latents = self.latents_of(&data.train)?;
        let mut p = Projector::new(self.config.projector.clone(), self.config.seed)?;
        let log = train_projector(&mut p, &latents, &data.train_captions, cfg, self.config.seed)?;
        p.params.round_to_f32();
        Ok((p, log))
    }

    pub fn train_projector_stage(&mut self, data: &Dataset) -> Result<()> {
        let cfg = self.config.projector_train.clone();
        let (p, log) = self.fit_projector(data, &cfg)?;
        self.projector = Some(p);
        self.logs.projector = log;
        Ok(())
    }

    pub fn train_extractor_stage(&mut self, data: &Dataset) -> Result<()> {
        let mut ext = FeatureExtractor::new(self.config.extractor.clone(), self.config.seed)?;
        let log = train_extractor(
            &mut ext,
            &data.train,
            &data.train_captions,
            &self.config.extractor_train,
            self.config.seed,
        )?;
        ext.params.round_to_f32();
        self.extractor = Some(ext);
        self.logs.extractor = log;
        Ok(())
    }

    pub fn train_stage(&mut self, stage: Stage, data: &Dataset) -> Result<()> {
        log::info!("training stage {}", stage.name());
        match stage {
            Stage::Vae => self.train_vae_stage(data),
            Stage::Diffusion => self.train_diffusion_stage(data),
            Stage::Projector => self.train_projector_stage(data),
            Stage::Extractor => self.train_extractor_stage(data),
        }
    }

    /// Raw VAE-space latents sampled for each condition row.
    pub fn sample(&self, conds: &Tensor2, seeds: &[u64], guidance: f64) -> Result<Tensor2> {
        let (den, norm) = self.denoiser()?;
        let z = sample_latents(den, conds, guidance, &self.schedule, seeds, self.config.sampler)?;
        Ok(norm.invert(&z))
    }

    /// Decodes latents to normalized features; `frames[i]` is the length of
    /// row `i`. With `realign` every latent first passes through the projector.
    pub fn decode(&self, latents: &Tensor2, frames: &[usize], realign: bool) -> Result<Vec<MotionFeatures>> {
        let z = if realign {
            self.projector()?.realign(latents)?
        } else {
            latents.clone()
        };
        let vae = self.vae()?;
        let mut out: Vec<Option<MotionFeatures>> = vec![None; z.rows()];
        let mut order: Vec<usize> = (0..z.rows()).collect();
        order.sort_by_key(|&i| frames[i]);
        for group in order.chunk_by(|&a, &b| frames[a] == frames[b]) {
            let zb = Tensor2::from_fn(group.len(), z.cols(), |r, c| z.get(group[r], c));
            for (k, m) in vae.decode_batch(&zb, frames[group[0]])?.into_iter().enumerate() {
                out[group[k]] = Some(m);
            }
        }
        Ok(out.into_iter().map(|m| m.expect("every row decoded")).collect())
    }

    /// One normalized motion for `caption`.
    pub fn generate(&self, caption: &str, frames: usize, seed: u64, realign: bool, guidance: f64) -> Result<MotionFeatures> {
        let c = self.embed(caption)?.to_row();
        let z = self.sample(&c, &[seed], guidance)?;
        Ok(self.decode(&z, &[frames], realign)?.remove(0))
    }

    pub fn denormalize(&self, f: &MotionFeatures) -> Result<MotionFeatures> {
        self.norm.invert(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vae.feature_dim, 92);
        assert_eq!(c.vae.max_frames, 119);
        assert_eq!(c.denoiser.cond_dim, 64);
        assert_eq!(c.projector.embed_dim, c.text_dim);
    }

    #[test]
    fn latent_norm_round_trips() {
        let z = Tensor2::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.37 - 1.0);
        let n = LatentNorm::fit(&z).unwrap();
        let back = n.invert(&n.apply(&z));
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_prerequisites() {
        assert_eq!("projector".parse::<Stage>().unwrap(), Stage::Projector);
        assert_eq!(Stage::Projector.prerequisites(), &[Stage::Vae, Stage::Diffusion]);
        assert!("bogus".parse::<Stage>().is_err());
    }
}
