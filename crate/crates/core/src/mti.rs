//! Motion textual inversion: learn one placeholder word embedding from
//! exemplar motions against the frozen stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_template, template_count};
use crate::diffcore::{AdamWConfig, Graph, OptState, ParamStore, Scope, Tensor2, Var};
use crate::diffusion::{q_sample, recover_x0_graph, EpsModel};
use crate::error::{Error, Result};
use crate::motion::MotionFeatures;
use crate::pipeline::{Stage, Stack};
use crate::rng;
use crate::textenc::{Vocabulary, PLACEHOLDER_WORD, UNK};

const STREAM_STEP: u64 = 0x90;
const STREAM_PROBE: u64 = 0x91;
const PROBE_DRAWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// Distance between projected clean-latent estimates.
    Realigned,
    /// Noise-prediction error.
    Mld,
    /// Distance between decoded clean-latent estimates.
    Feat,
}

impl LossSpace {
    pub const ALL: [LossSpace; 3] = [LossSpace::Realigned, LossSpace::Mld, LossSpace::Feat];

    pub fn name(self) -> &'static str {
        match self {
            LossSpace::Realigned => "realigned",
            LossSpace::Mld => "mld",
            LossSpace::Feat => "feat",
        }
    }
}

impl std::str::FromStr for LossSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossSpace::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss space `{s}` (realigned, mld, feat)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderToken {
    pub word: String,
    pub embedding: Vec<f64>,
    pub init_word: String,
}

impl PlaceholderToken {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Copies the row of `init_word` (the unknown-word row when absent).
pub fn init_placeholder(init_word: &str, vocab: &Vocabulary) -> PlaceholderToken {
    let idx = vocab.index_of(&init_word.to_lowercase()).unwrap_or(UNK);
    PlaceholderToken {
        word: PLACEHOLDER_WORD.to_string(),
        embedding: vocab.row(idx).to_vec(),
        init_word: init_word.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub loss_space: LossSpace,
    pub apply_realign_at_generation: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            lr: 5e-3,
            batch: 4,
            loss_space: LossSpace::Realigned,
            apply_realign_at_generation: true,
        }
    }
}

impl InversionConfig {
    pub fn for_space(loss_space: LossSpace) -> Self {
        Self {
            loss_space,
            apply_realign_at_generation: loss_space == LossSpace::Realigned,
            ..Self::default()
        }
    }
}

/// One noised batch: raw VAE latents of equal-length crops, their length,
/// per-item steps and noise.
#[derive(Clone, Debug)]
pub struct MtiDraw {
    pub z0: Tensor2,
    pub frames: usize,
    pub t: Vec<usize>,
    pub eps: Tensor2,
    pub template: String,
}

/// Inversion loss for `draw` with the placeholder embedding `v` (`1 x E`),
/// using the stack's denoiser.
pub fn mti_loss<'a>(
    g: &mut Graph<'a>,
    stack: &'a Stack,
    draw: &MtiDraw,
    v: Var,
    space: LossSpace,
) -> Result<Var> {
    let (den, _) = stack.denoiser()?;
    mti_loss_with(g, stack, den, draw, v, space)
}

/// As [`mti_loss`] with any noise model in place of the denoiser. Both
/// branches go through the same operations, so a model that returns the true
/// noise gives exactly zero.
pub fn mti_loss_with<'a, M: EpsModel>(
    g: &mut Graph<'a>,
    stack: &'a Stack,
    model: &'a M,
    draw: &MtiDraw,
    v: Var,
    space: LossSpace,
) -> Result<Var> {
    let (_, norm) = stack.denoiser()?;
    let (b, m) = draw.z0.shape();
    let z0n = norm.apply(&draw.z0);
    let mut zt = Tensor2::zeros(b, m);
    for i in 0..b {
        zt.row_mut(i).copy_from_slice(&q_sample(z0n.row(i), draw.t[i], draw.eps.row(i), &stack.schedule)?);
    }
    let tokens = stack.vocab.tokenize(&draw.template);
    let c = stack.vocab.embed_graph(g, &tokens, v)?;
    let c = g.repeat_rows(c, b)?;
    let ztv = g.constant(zt);
    let eps_hat = model.predict(g, Scope::frozen(model.params()), ztv, &draw.t, c, &vec![false; b], None)?;
    let eps = g.constant(draw.eps.clone());
    if space == LossSpace::Mld {
        return sum_sq_per_row(g, eps_hat, eps);
    }
    let to_vae = |g: &mut Graph<'a>, e: Var| -> Result<Var> {
        let x0n = recover_x0_graph(g, ztv, e, &draw.t, &stack.schedule)?;
        let x0 = g.mul_const(x0n, Tensor2::from_fn(b, m, |_, c| norm.std[c]))?;
        let shift = g.constant(Tensor2::from_fn(b, m, |_, c| norm.mean[c]));
        g.add(x0, shift)
    };
    let pred = to_vae(g, eps_hat)?;
    let target = to_vae(g, eps)?;
    match space {
        LossSpace::Realigned => {
            let p = stack.projector()?;
            let s = Scope::frozen(&p.params);
            let a = p.project_graph(g, s, pred, None)?;
            let b = p.project_graph(g, s, target, None)?;
            sum_sq_per_row(g, a, b)
        }
        LossSpace::Feat => {
            let vae = stack.vae()?;
            let s = Scope::frozen(&vae.params);
            let a = vae.decode_graph(g, s, pred, draw.frames)?;
            let b = vae.decode_graph(g, s, target, draw.frames)?;
            let d = g.sub(a, b)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        }
        LossSpace::Mld => unreachable!("handled above"),
    }
}

fn sum_sq_per_row(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let rows = g.value(a).rows();
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// All template captions with the placeholder word.
pub fn templates() -> Vec<String> {
    (0..template_count()).map(render_template).collect()
}

fn draw_batch(stack: &Stack, exemplars: &[MotionFeatures], batch: usize, r: &mut rng::StreamRng) -> Result<MtiDraw> {
    let arch = &stack.vae()?.arch;
    let k = rng::uniform_int(r, 0, exemplars.len() - 1);
    let ex = &exemplars[k];
    let hi = ex.frames().min(arch.max_frames);
    if hi < arch.min_frames {
        return Err(Error::InvalidArgument(format!(
            "exemplar has {} frames, at least {} are needed",
            ex.frames(),
            arch.min_frames
        )));
    }
    let frames = rng::uniform_int(r, arch.min_frames, hi);
    let crops: Vec<Tensor2> = (0..batch)
        .map(|_| {
            let start = rng::uniform_int(r, 0, ex.frames() - frames);
            ex.data.slice_rows(start, frames)
        })
        .collect();
    let refs: Vec<&Tensor2> = crops.iter().collect();
    let z0 = stack.vae()?.encode_means(&refs)?;
    let tpl = templates();
    let template = tpl[rng::uniform_int(r, 0, tpl.len() - 1)].clone();
    let t = (0..batch).map(|_| rng::uniform_int(r, 1, stack.schedule.steps())).collect();
    let eps = Tensor2::new(batch, z0.cols(), rng::gaussian_vec(r, batch * z0.cols()))?;
    Ok(MtiDraw {
        z0,
        frames,
        t,
        eps,
        template,
    })
}

fn loss_value(stack: &Stack, draw: &MtiDraw, v: &[f64], space: LossSpace) -> Result<f64> {
    let mut g = Graph::new();
    let vv = g.constant(Tensor2::row_vector(v.to_vec()));
    let l = mti_loss(&mut g, stack, draw, vv, space)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub token: PlaceholderToken,
    /// Minibatch loss before each update.
    pub trace: Vec<f64>,
    /// Mean loss over fixed probe draws at the initial and final embedding.
    pub probe_initial: f64,
    pub probe_final: f64,
}

/// Optimizes the placeholder row with Adam; every other weight stays frozen.
pub fn invert_motion(
    stack: &Stack,
    exemplars: &[MotionFeatures],
    init_word: &str,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<InversionResult> {
    for st in [Stage::Vae, Stage::Diffusion] {
        stack.require(st)?;
    }
    if cfg.loss_space == LossSpace::Realigned {
        stack.require(Stage::Projector)?;
    }
    if exemplars.is_empty() || cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("inversion needs exemplars, steps >= 1 and batch >= 1".into()));
    }
    let token = init_placeholder(init_word, &stack.vocab);
    let mut store = ParamStore::new();
    let id = store.add("mti.v", Tensor2::row_vector(token.embedding.clone()));
    let mut opt = OptState::new(&store, AdamWConfig::adam(cfg.lr));
    let mut probe_rng = rng::stream(seed, &[STREAM_PROBE]);
    let probes: Vec<MtiDraw> = (0..PROBE_DRAWS)
        .map(|_| draw_batch(stack, exemplars, cfg.batch, &mut probe_rng))
        .collect::<Result<_>>()?;
    let probe = |v: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for d in &probes {
            s += loss_value(stack, d, v, cfg.loss_space)?;
        }
        Ok(s / probes.len() as f64)
    };
    let probe_initial = probe(&token.embedding)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(seed, &[STREAM_STEP, step as u64]);
        let draw = draw_batch(stack, exemplars, cfg.batch, &mut r)?;
        let grads = {
            let mut g = Graph::new();
            let v = Scope::trainable(&store).w(&mut g, id);
            let l = mti_loss(&mut g, stack, &draw, v, cfg.loss_space)?;
            let lv = g.scalar(l);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: "inversion",
                    epoch: step,
                    detail: format!("loss {lv}"),
                });
            }
            trace.push(lv);
            g.backward(l)?
        };
        opt.step(&mut store, &grads)?;
    }
    let embedding = store.get(id).data().to_vec();
    let probe_final = probe(&embedding)?;
    Ok(InversionResult {
        token: PlaceholderToken { embedding, ..token },
        trace,
        probe_initial,
        probe_final,
    })
}

/// Normalized motion for template `template_id` with the learned word.
pub fn generate_with_token(
    stack: &Stack,
    token: &PlaceholderToken,
    template_id: usize,
    frames: usize,
    guidance: f64,
    seed: u64,
    apply_realign: bool,
) -> Result<MotionFeatures> {
    let tokens = stack.vocab.tokenize(&render_template(template_id % template_count()));
    let c = stack.vocab.embed_tokens(&tokens, Some(&token.embedding))?;
    let z = stack.sample(&c.to_row(), &[seed], guidance)?;
    Ok(stack.decode(&z, &[frames], apply_realign)?.remove(0))
}
