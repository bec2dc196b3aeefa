//! Conditional DDPM over VAE latents: noise schedule, epsilon-predicting
//! transformer denoiser, guided sampling and training with condition dropout.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    AdamWConfig, DropoutStream, Graph, Linear, OptState, ParamId, ParamStore, Scope, StackConfig,
    Tensor2, TransformerStack, Var,
};
use crate::error::{Error, Result};
use crate::rng;

const STREAM_INIT: u64 = 0xD0;
const STREAM_TRAIN: u64 = 0xD1;
const STREAM_SAMPLE: u64 = 0xD2;
const STREAM_DROPOUT: u64 = 0xD3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    DdpmAncestral,
    DdimDeterministic,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" | "ddim_deterministic" => Ok(Sampler::DdimDeterministic),
            "ddpm" | "ddpm_ancestral" => Ok(Sampler::DdpmAncestral),
            other => Err(Error::Parse(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Tables indexed by step `t` in `1..=T` (entry `t - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Ascending subsequence of `1..=T` ending at `T`.
    pub inference_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `alpha_bar` at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Replaces the inference subsequence by `count` evenly spaced steps.
    pub fn with_inference_steps(mut self, count: usize) -> Result<Self> {
        self.inference_steps = even_steps(self.steps(), count)?;
        Ok(self)
    }
}

fn even_steps(t_max: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > t_max {
        return Err(Error::InvalidArgument(format!(
            "inference step count {count} must be in [1, {t_max}]"
        )));
    }
    let mut out: Vec<usize> = (1..=count)
        .map(|k| ((k * t_max) as f64 / count as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

/// Linear beta schedule with `inference_count` evenly spaced sampling steps.
pub fn build_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    inference_count: usize,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        inference_steps: even_steps(t_max, inference_count.min(t_max))?,
    })
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(z0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// `(z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn recover_x0(z_t: &[f64], eps_hat: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar_at(t);
    if ab <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha_bar at step {t} is zero")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.iter().zip(eps_hat).map(|(z, e)| (z - b * e) / a).collect())
}

/// Graph form of [`recover_x0`] for a batch with per-row steps.
pub fn recover_x0_graph(
    g: &mut Graph<'_>,
    z_t: Var,
    eps_hat: Var,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let (rows, cols) = g.value(z_t).shape();
    if t.len() != rows {
        return Err(Error::Shape {
            op: "recover_x0",
            detail: format!("{} steps for {rows} rows", t.len()),
        });
    }
    for &s in t {
        schedule.check_t(s)?;
    }
    let inv_a = Tensor2::from_fn(rows, cols, |r, _| 1.0 / schedule.alpha_bar_at(t[r]).sqrt());
    let coef = Tensor2::from_fn(rows, cols, |r, _| {
        let ab = schedule.alpha_bar_at(t[r]);
        (1.0 - ab).sqrt() / ab.sqrt()
    });
    let a = g.mul_const(z_t, inv_a)?;
    let b = g.mul_const(eps_hat, coef)?;
    g.sub(a, b)
}

/// Anything that predicts noise for a batch of noised latents.
pub trait EpsModel {
    fn latent_dim(&self) -> usize;

    fn params(&self) -> &ParamStore;

    /// `z_t` is `B x M`, `cond` is `B x E`; rows with `null[i]` use the
    /// unconditional token instead of `cond` row `i`. Weights come from `s`,
    /// which must share the layout of [`EpsModel::params`].
    fn predict<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        z_t: Var,
        t: &[usize],
        cond: Var,
        null: &[bool],
        dropout: Option<&mut DropoutStream>,
    ) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Add `sqrt(1 - ab_t) z_t`, the noise estimate for standard-normal
    /// latents, to the network output.
    pub prior_skip: bool,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            cond_dim: 64,
            layers: 4,
            heads: 4,
            hidden_dim: 128,
            dropout: 0.0,
            prior_skip: true,
        }
    }
}

/// Transformer with long skips over the two-token sequence
/// `[condition + time embedding, noised latent]`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub params: ParamStore,
    time_proj: Linear,
    cond_proj: Linear,
    null_token: ParamId,
    latent_in: Linear,
    stack: TransformerStack,
    out: Linear,
    /// `sqrt(1 - ab_t)` indexed by `t`; empty without the prior skip.
    skip_scale: Vec<f64>,
}

/// Sinusoidal embedding of integer steps, one row per step.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor2 {
    let half = dim / 2;
    Tensor2::from_fn(t.len(), dim, |r, c| {
        let i = c % half.max(1);
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let x = t[r] as f64 * freq;
        if c < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        let stack_cfg = StackConfig::new(arch.layers, arch.heads, arch.hidden_dim)
            .with_long_skip(true)
            .with_dropout(arch.dropout);
        stack_cfg.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[STREAM_INIT]);
        let h = arch.hidden_dim;
        let time_proj = Linear::new(&mut params, "den.time_proj", h, h, &mut r);
        let cond_proj = Linear::new(&mut params, "den.cond_proj", arch.cond_dim, h, &mut r);
        let null_token = params.add_normal("den.null_token", 1, h, 0.02, &mut r);
        let latent_in = Linear::new(&mut params, "den.latent_in", arch.latent_dim, h, &mut r);
        let stack = TransformerStack::new(&mut params, "den.stack", stack_cfg, &mut r)?;
        let out = Linear::new(&mut params, "den.out", h, arch.latent_dim, &mut r);
        let skip_scale = if arch.prior_skip {
            (0..=schedule.steps()).map(|t| (1.0 - schedule.alpha_bar_at(t)).sqrt()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            arch,
            params,
            time_proj,
            cond_proj,
            null_token,
            latent_in,
            stack,
            out,
            skip_scale,
        })
    }
}

impl EpsModel for Denoiser {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn predict<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        z_t: Var,
        t: &[usize],
        cond: Var,
        null: &[bool],
        dropout: Option<&mut DropoutStream>,
    ) -> Result<Var> {
        let b = g.value(z_t).rows();
        if t.len() != b || null.len() != b || g.value(cond).rows() != b {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!(
                    "batch {b} with {} steps, {} null flags, {} conditions",
                    t.len(),
                    null.len(),
                    g.value(cond).rows()
                ),
            });
        }
        let temb = g.constant(timestep_embedding(t, self.arch.hidden_dim));
        let temb = self.time_proj.forward(g, s, temb)?;
        let ch = self.cond_proj.forward(g, s, cond)?;
        let nt = s.w(g, self.null_token);
        let pool = g.concat_rows(&[ch, nt])?;
        let pick: Vec<usize> = (0..b).map(|i| if null[i] { b } else { i }).collect();
        let ctok = g.gather_rows(pool, &pick)?;
        let ctok = g.add(ctok, temb)?;
        let ztok = self.latent_in.forward(g, s, z_t)?;
        let both = g.concat_rows(&[ctok, ztok])?;
        let order: Vec<usize> = (0..b).flat_map(|i| [i, b + i]).collect();
        let seq = g.gather_rows(both, &order)?;
        let seq = self.stack.add_positions(g, seq, 2)?;
        let h = self.stack.forward(g, s, seq, 2, dropout)?;
        let lat_rows: Vec<usize> = (0..b).map(|i| 2 * i + 1).collect();
        let h = g.gather_rows(h, &lat_rows)?;
        let eps = self.out.forward(g, s, h)?;
        if self.skip_scale.is_empty() {
            return Ok(eps);
        }
        let mut col = Vec::with_capacity(b);
        for &ti in t {
            col.push(*self.skip_scale.get(ti).ok_or_else(|| {
                Error::InvalidArgument(format!("step {ti} outside the schedule of {}", self.skip_scale.len() - 1))
            })?);
        }
        let col = g.constant(Tensor2::new(b, 1, col)?);
        let prior = g.mul_col(z_t, col)?;
        g.add(eps, prior)
    }
}

/// Guided prediction `s * eps_c + (1 - s) * eps_null` for a batch, evaluated in
/// one pass over `2B` rows.
pub fn cfg_epsilon<M: EpsModel>(
    model: &M,
    z_t: &Tensor2,
    t: &[usize],
    cond: &Tensor2,
    scale: f64,
) -> Result<Tensor2> {
    let b = z_t.rows();
    let mut g = Graph::new();
    let mut zz = z_t.data().to_vec();
    zz.extend_from_slice(z_t.data());
    let z2 = g.constant(Tensor2::new(2 * b, z_t.cols(), zz)?);
    let mut cc = cond.data().to_vec();
    cc.extend_from_slice(cond.data());
    let c2 = g.constant(Tensor2::new(2 * b, cond.cols(), cc)?);
    let mut t2 = t.to_vec();
    t2.extend_from_slice(t);
    let null: Vec<bool> = (0..2 * b).map(|i| i >= b).collect();
    let eps = model.predict(&mut g, Scope::frozen(model.params()), z2, &t2, c2, &null, None)?;
    let e = g.value(eps);
    Ok(Tensor2::from_fn(b, z_t.cols(), |r, c| {
        scale * e.get(r, c) + (1.0 - scale) * e.get(b + r, c)
    }))
}

/// Per-step noise draws for a training batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor2,
    pub null: Vec<bool>,
}

impl NoiseDraw {
    pub fn sample(
        r: &mut rng::StreamRng,
        batch: usize,
        dim: usize,
        t_max: usize,
        cond_dropout: f64,
    ) -> Result<Self> {
        let t = (0..batch).map(|_| rng::uniform_int(r, 1, t_max)).collect();
        let null = (0..batch).map(|_| rng::uniform(r, 0.0, 1.0) < cond_dropout).collect();
        let eps = Tensor2::new(batch, dim, rng::gaussian_vec(r, batch * dim))?;
        Ok(Self { t, eps, null })
    }
}

/// `mean_i ||eps_i - eps_theta(z_t_i, t_i, c_i)||^2` for the given draw.
pub fn diffusion_loss<'a, M: EpsModel>(
    g: &mut Graph<'a>,
    model: &M,
    s: Scope<'a>,
    z0: &Tensor2,
    cond: Var,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    dropout: Option<&mut DropoutStream>,
) -> Result<Var> {
    let (b, m) = z0.shape();
    if draw.eps.shape() != (b, m) {
        return Err(Error::Shape {
            op: "diffusion_loss",
            detail: format!("noise {:?} for latents {:?}", draw.eps.shape(), (b, m)),
        });
    }
    let mut zt = Tensor2::zeros(b, m);
    for i in 0..b {
        let row = q_sample(z0.row(i), draw.t[i], draw.eps.row(i), schedule)?;
        zt.row_mut(i).copy_from_slice(&row);
    }
    let zt = g.constant(zt);
    let pred = model.predict(g, s, zt, &draw.t, cond, &draw.null, dropout)?;
    let target = g.constant(draw.eps.clone());
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Starting noise for sample `seed`.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    rng::gaussian_vec(&mut rng::stream(seed, &[STREAM_SAMPLE]), dim)
}

/// Samples one latent per row of `cond`, row `i` seeded by `seeds[i]`.
pub fn sample_latents<M: EpsModel>(
    model: &M,
    cond: &Tensor2,
    scale: f64,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    sampler: Sampler,
) -> Result<Tensor2> {
    let b = cond.rows();
    let m = model.latent_dim();
    if seeds.len() != b {
        return Err(Error::Shape {
            op: "sample_latent",
            detail: format!("{} seeds for {b} conditions", seeds.len()),
        });
    }
    let mut z = Tensor2::zeros(b, m);
    for (i, &s) in seeds.iter().enumerate() {
        z.row_mut(i).copy_from_slice(&initial_noise(s, m));
    }
    let mut noise_rngs: Vec<rng::StreamRng> = seeds
        .iter()
        .map(|&s| rng::stream(s, &[STREAM_SAMPLE, 1]))
        .collect();
    let steps = &schedule.inference_steps;
    for k in (0..steps.len()).rev() {
        let t = steps[k];
        let prev = if k == 0 { 0 } else { steps[k - 1] };
        let tv = vec![t; b];
        let eps = cfg_epsilon(model, &z, &tv, cond, scale)?;
        let ab_t = schedule.alpha_bar_at(t);
        let ab_p = schedule.alpha_bar_at(prev);
        for i in 0..b {
            let x0 = recover_x0(z.row(i), eps.row(i), t, schedule)?;
            let row = z.row_mut(i);
            match sampler {
                Sampler::DdimDeterministic => {
                    for ((zz, x), e) in row.iter_mut().zip(&x0).zip(eps.row(i)) {
                        *zz = ab_p.sqrt() * x + (1.0 - ab_p).sqrt() * e;
                    }
                }
                Sampler::DdpmAncestral => {
                    let a = ab_t / ab_p;
                    let beta = 1.0 - a;
                    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
                    let ct = a.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
                    let var = beta * (1.0 - ab_p) / (1.0 - ab_t);
                    for (zz, x) in row.iter_mut().zip(&x0) {
                        let mut v = c0 * x + ct * *zz;
                        if prev > 0 {
                            v += var.sqrt() * rng::gaussian(&mut noise_rngs[i]);
                        }
                        *zz = v;
                    }
                }
            }
        }
    }
    z.ensure_finite("sampled latent")?;
    Ok(z)
}

pub fn sample_latent<M: EpsModel>(
    model: &M,
    cond: &[f64],
    scale: f64,
    schedule: &NoiseSchedule,
    seed: u64,
    sampler: Sampler,
) -> Result<Vec<f64>> {
    let c = Tensor2::row_vector(cond.to_vec());
    Ok(sample_latents(model, &c, scale, schedule, &[seed], sampler)?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLogRow {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains the denoiser on fixed latents (`N x M`) paired with conditions
/// (`N x E`). Log row `e` is the mean minibatch loss of epoch `e`.
pub fn train_diffusion(
    model: &mut Denoiser,
    latents: &Tensor2,
    conds: &Tensor2,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<Vec<DiffusionLogRow>> {
    let n = latents.rows();
    if n == 0 || conds.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty latents and conditions, got {n} and {}",
            conds.rows()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "cond_dropout must be in [0, 1] and batch_size positive".into(),
        ));
    }
    let mut opt = OptState::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::new(cfg.lr)
        },
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.params.clone();
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(seed, &[STREAM_TRAIN, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut order);
        let mut drop = DropoutStream::new(seed, &[STREAM_DROPOUT, epoch as u64]);
        let (mut total, mut count) = (0.0, 0.0);
        for (bi, ids) in order.chunks(cfg.batch_size).enumerate() {
            let z0 = Tensor2::from_fn(ids.len(), latents.cols(), |r, c| latents.get(ids[r], c));
            let c = Tensor2::from_fn(ids.len(), conds.cols(), |r, c| conds.get(ids[r], c));
            let draw = NoiseDraw::sample(&mut r, ids.len(), latents.cols(), schedule.steps(), cfg.cond_dropout)?;
            let grads = {
                let mut g = Graph::new();
                let cv = g.constant(c);
                let dropout = (model.arch.dropout > 0.0).then_some(&mut drop);
                let s = Scope::trainable(&model.params);
                let loss = diffusion_loss(&mut g, &*model, s, &z0, cv, &draw, schedule, dropout)?;
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    model.params = last_good;
                    return Err(Error::Diverged {
                        stage: "diffusion",
                        epoch,
                        detail: format!("loss {lv} at batch {bi}"),
                    });
                }
                total += lv * ids.len() as f64;
                count += ids.len() as f64;
                g.backward(loss)?
            };
            opt.step(&mut model.params, &grads)?;
        }
        if epoch % 50 == 0 {
            log::info!("diffusion epoch {epoch}: loss {:.5}", total / count);
        }
        log.push(DiffusionLogRow {
            epoch,
            loss: total / count,
        });
        last_good.load_from(&model.params)?;
    }
    Ok(log)
}
