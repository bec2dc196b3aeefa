//! Transformer motion VAE compressing a variable-length feature sequence into
//! a single latent vector.
//!
//! Frames are grouped into patches of `patch_frames` consecutive frames, one
//! token per patch. The encoder reads `[mu token, sigma token, patch tokens]`
//! and the decoder reads `[latent token, zero tokens]`, one zero token per
//! output patch; both add sinusoidal positions.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    AdamWConfig, Graph, Linear, OptState, ParamId, ParamStore, Scope, StackConfig, Tensor2,
    TransformerStack, Var,
};
use crate::error::{Error, Result};
use crate::motion::MotionFeatures;
use crate::rng;

const STREAM_INIT: u64 = 0xA0;
const STREAM_BATCH: u64 = 0xA1;
const STREAM_EPS: u64 = 0xA2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub patch_frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Valid feature-frame counts for encode and decode.
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            feature_dim: 92,
            latent_dim: 64,
            patch_frames: 4,
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            dropout: 0.0,
            min_frames: 39,
            max_frames: 119,
        }
    }
}

impl VaeArch {
    fn stack(&self) -> StackConfig {
        StackConfig::new(self.layers, self.heads, self.hidden_dim).with_dropout(self.dropout)
    }

    pub fn validate(&self) -> Result<()> {
        self.stack().validate()?;
        if self.latent_dim == 0 || self.patch_frames == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "latent_dim, patch_frames and feature_dim must be positive".into(),
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidArgument(format!(
                "bad frame range [{}, {}]",
                self.min_frames, self.max_frames
            )));
        }
        Ok(())
    }

    fn tokens(&self, frames: usize) -> usize {
        frames.div_ceil(self.patch_frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kl_weight: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            kl_weight: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncodeMode {
    Mean,
    Sample(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeEncoding {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub params: ParamStore,
    in_proj: Linear,
    mu_token: ParamId,
    sigma_token: ParamId,
    encoder: TransformerStack,
    mu_head: Linear,
    logvar_head: Linear,
    latent_in: Linear,
    decoder: TransformerStack,
    out_proj: Linear,
}

/// `frames x D` -> `ceil(frames / P) x (P * D)`, zero padded at the end.
fn patchify(x: &Tensor2, p: usize) -> Tensor2 {
    let (n, d) = x.shape();
    let t = n.div_ceil(p);
    let mut data = vec![0.0; t * p * d];
    data[..n * d].copy_from_slice(x.data());
    Tensor2::new(t, p * d, data).expect("patch layout")
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[STREAM_INIT]);
        let h = arch.hidden_dim;
        let pd = arch.patch_frames * arch.feature_dim;
        let in_proj = Linear::new(&mut params, "vae.in_proj", pd, h, &mut r);
        let mu_token = params.add_normal("vae.mu_token", 1, h, 0.02, &mut r);
        let sigma_token = params.add_normal("vae.sigma_token", 1, h, 0.02, &mut r);
        let encoder = TransformerStack::new(&mut params, "vae.encoder", arch.stack(), &mut r)?;
        let mu_head = Linear::new(&mut params, "vae.mu_head", h, arch.latent_dim, &mut r);
        let logvar_head = Linear::new(&mut params, "vae.logvar_head", h, arch.latent_dim, &mut r);
        let latent_in = Linear::new(&mut params, "vae.latent_in", arch.latent_dim, h, &mut r);
        let decoder = TransformerStack::new(&mut params, "vae.decoder", arch.stack(), &mut r)?;
        let out_proj = Linear::new(&mut params, "vae.out_proj", h, pd, &mut r);
        Ok(Self {
            arch,
            params,
            in_proj,
            mu_token,
            sigma_token,
            encoder,
            mu_head,
            logvar_head,
            latent_in,
            decoder,
            out_proj,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames < self.arch.min_frames || frames > self.arch.max_frames {
            return Err(Error::InvalidArgument(format!(
                "length {frames} outside the supported range [{}, {}]",
                self.arch.min_frames, self.arch.max_frames
            )));
        }
        Ok(())
    }

    /// Encoder over a batch of equal-length normalized feature matrices.
    /// Returns `(mu, logvar)`, each `B x M`.
    pub fn encode_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        batch: &[&Tensor2],
    ) -> Result<(Var, Var)> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty encode batch".into()))?;
        let frames = first.rows();
        self.check_frames(frames)?;
        let mut data = Vec::new();
        for x in batch {
            if x.shape() != (frames, self.arch.feature_dim) {
                return Err(Error::Shape {
                    op: "vae_encode",
                    detail: format!(
                        "expected {frames} x {} features, got {:?}",
                        self.arch.feature_dim,
                        x.shape()
                    ),
                });
            }
            data.extend(patchify(x, self.arch.patch_frames).into_data());
        }
        let t = self.arch.tokens(frames);
        let b = batch.len();
        let patches = g.constant(Tensor2::new(b * t, self.arch.patch_frames * self.arch.feature_dim, data)?);
        let h = self.in_proj.forward(g, s, patches)?;
        let mu_tok = s.w(g, self.mu_token);
        let sig_tok = s.w(g, self.sigma_token);
        let all = g.concat_rows(&[mu_tok, sig_tok, h])?;
        let mut idx = Vec::with_capacity(b * (t + 2));
        for i in 0..b {
            idx.push(0);
            idx.push(1);
            idx.extend((0..t).map(|k| 2 + i * t + k));
        }
        let tokens = g.gather_rows(all, &idx)?;
        let tokens = self.encoder.add_positions(g, tokens, t + 2)?;
        let out = self.encoder.forward(g, s, tokens, t + 2, None)?;
        let mu_rows: Vec<usize> = (0..b).map(|i| i * (t + 2)).collect();
        let sig_rows: Vec<usize> = (0..b).map(|i| i * (t + 2) + 1).collect();
        let mu_h = g.gather_rows(out, &mu_rows)?;
        let sig_h = g.gather_rows(out, &sig_rows)?;
        let mu = self.mu_head.forward(g, s, mu_h)?;
        let logvar = self.logvar_head.forward(g, s, sig_h)?;
        Ok((mu, logvar))
    }

    /// Decoder for a `B x M` latent batch; returns `(B * frames) x D`, item-major.
    pub fn decode_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        z: Var,
        frames: usize,
    ) -> Result<Var> {
        self.check_frames(frames)?;
        let (b, m) = g.value(z).shape();
        if m != self.arch.latent_dim {
            return Err(Error::Shape {
                op: "vae_decode",
                detail: format!("latent has {m} dims, model expects {}", self.arch.latent_dim),
            });
        }
        let t = self.arch.tokens(frames);
        let p = self.arch.patch_frames;
        let d = self.arch.feature_dim;
        let lat = self.latent_in.forward(g, s, z)?;
        let zero = g.constant(Tensor2::zeros(1, self.arch.hidden_dim));
        let all = g.concat_rows(&[lat, zero])?;
        let mut idx = Vec::with_capacity(b * (t + 1));
        for i in 0..b {
            idx.push(i);
            idx.extend(std::iter::repeat_n(b, t));
        }
        let tokens = g.gather_rows(all, &idx)?;
        let tokens = self.decoder.add_positions(g, tokens, t + 1)?;
        let out = self.decoder.forward(g, s, tokens, t + 1, None)?;
        let motion_rows: Vec<usize> = (0..b)
            .flat_map(|i| (1..=t).map(move |k| i * (t + 1) + k))
            .collect();
        let h = g.gather_rows(out, &motion_rows)?;
        let y = self.out_proj.forward(g, s, h)?;
        let y = g.reshape(y, b * t * p, d)?;
        if t * p == frames {
            return Ok(y);
        }
        let keep: Vec<usize> = (0..b)
            .flat_map(|i| (0..frames).map(move |f| i * t * p + f))
            .collect();
        g.gather_rows(y, &keep)
    }

    pub fn encode(&self, features: &MotionFeatures, mode: EncodeMode) -> Result<VaeEncoding> {
        let mean = features.data.sum() / features.data.len().max(1) as f64;
        if mean.abs() > 10.0 {
            log::warn!("vae_encode input has mean {mean:.2}; features look unnormalized");
        }
        let mut g = Graph::new();
        let (mu, lv) = self.encode_graph(&mut g, Scope::frozen(&self.params), &[&features.data])?;
        let mu = g.value(mu).data().to_vec();
        let logvar = g.value(lv).data().to_vec();
        let z = match mode {
            EncodeMode::Mean => mu.clone(),
            EncodeMode::Sample(seed) => {
                let eps = rng::gaussian_vec(&mut rng::stream(seed, &[STREAM_EPS]), mu.len());
                mu.iter()
                    .zip(&logvar)
                    .zip(&eps)
                    .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                    .collect()
            }
        };
        Ok(VaeEncoding { mu, logvar, z })
    }

    /// Mean latents for many motions, batched by length. Row `i` of the result
    /// belongs to `features[i]`.
    pub fn encode_means(&self, features: &[&Tensor2]) -> Result<Tensor2> {
        let m = self.arch.latent_dim;
        let mut out = Tensor2::zeros(features.len(), m);
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.sort_by_key(|&i| features[i].rows());
        for group in order.chunk_by(|&a, &b| features[a].rows() == features[b].rows()) {
            let batch: Vec<&Tensor2> = group.iter().map(|&i| features[i]).collect();
            let mut g = Graph::new();
            let (mu, _) = self.encode_graph(&mut g, Scope::frozen(&self.params), &batch)?;
            for (k, &i) in group.iter().enumerate() {
                out.row_mut(i).copy_from_slice(g.value(mu).row(k));
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &[f64], frames: usize) -> Result<MotionFeatures> {
        let zt = Tensor2::row_vector(z.to_vec());
        Ok(self.decode_batch(&zt, frames)?.remove(0))
    }

    /// Decodes each row of `z` to `frames` frames.
    pub fn decode_batch(&self, z: &Tensor2, frames: usize) -> Result<Vec<MotionFeatures>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let y = self.decode_graph(&mut g, Scope::frozen(&self.params), zv, frames)?;
        let y = g.value(y);
        Ok((0..z.rows())
            .map(|i| MotionFeatures::new(y.slice_rows(i * frames, frames)))
            .collect())
    }
}

/// Reparameterized `mu + exp(logvar / 2) * eps` with constant `eps`.
pub fn reparameterize(g: &mut Graph<'_>, mu: Var, logvar: Var, eps: Tensor2) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul_const(sigma, eps)?;
    g.add(mu, noise)
}

/// Loss terms as graph nodes.
pub struct VaeLossVars {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
}

/// `mse` is the mean over all entries; `kl` is the closed-form Gaussian KL
/// summed over latent dims and averaged over the batch.
pub fn vae_loss(
    g: &mut Graph<'_>,
    x: Var,
    x_hat: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<VaeLossVars> {
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff);
    let mse = g.mean_all(sq);
    let b = g.value(mu).rows() as f64;
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum_all(t);
    let kl = g.scale(s, 0.5 / b);
    let wkl = g.scale(kl, kl_weight);
    let total = g.add(mse, wkl)?;
    Ok(VaeLossVars { total, mse, kl })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLogRow {
    pub epoch: usize,
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
}

/// Training batches: items sorted by length (random tie order), cut into
/// consecutive chunks, chunk order shuffled. Each chunk is cropped to its
/// shortest member.
pub(crate) fn length_buckets(lengths: &[usize], batch: usize, r: &mut rng::StreamRng) -> Vec<Vec<usize>> {
    let mut keyed: Vec<(usize, u64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, rand::Rng::random::<u64>(r), i))
        .collect();
    keyed.sort();
    let ids: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    let mut chunks: Vec<Vec<usize>> = ids.chunks(batch).map(|c| c.to_vec()).collect();
    rng::shuffle(r, &mut chunks);
    chunks
}

/// One minibatch loss. Returns `(total, mse, kl)` nodes.
fn batch_loss<'a>(
    model: &'a VaeModel,
    g: &mut Graph<'a>,
    s: Scope<'a>,
    crops: &[Tensor2],
    eps: Option<Tensor2>,
    kl_weight: f64,
) -> Result<VaeLossVars> {
    let refs: Vec<&Tensor2> = crops.iter().collect();
    let (mu, logvar) = model.encode_graph(g, s, &refs)?;
    let z = match eps {
        Some(e) => reparameterize(g, mu, logvar, e)?,
        None => mu,
    };
    let frames = crops[0].rows();
    let y = model.decode_graph(g, s, z, frames)?;
    let mut data = Vec::with_capacity(crops.len() * frames * model.arch.feature_dim);
    for c in crops {
        data.extend_from_slice(c.data());
    }
    let x = g.constant(Tensor2::new(crops.len() * frames, model.arch.feature_dim, data)?);
    vae_loss(g, x, y, mu, logvar, kl_weight)
}

pub(crate) fn crop_batch(
    train: &[MotionFeatures],
    ids: &[usize],
    max_frames: usize,
    r: Option<&mut rng::StreamRng>,
) -> Vec<Tensor2> {
    let len = ids
        .iter()
        .map(|&i| train[i].frames())
        .min()
        .unwrap_or(0)
        .min(max_frames);
    let mut r = r;
    ids.iter()
        .map(|&i| {
            let n = train[i].frames();
            let start = match r.as_deref_mut() {
                Some(r) if n > len => rng::uniform_int(r, 0, n - len),
                _ => 0,
            };
            train[i].data.slice_rows(start, len)
        })
        .collect()
}

/// Mean loss over the training set at the current weights, using mean latents.
pub fn evaluate_vae(model: &VaeModel, data: &[MotionFeatures], cfg: &VaeTrainConfig) -> Result<VaeLogRow> {
    let lengths: Vec<usize> = data.iter().map(|f| f.frames()).collect();
    let mut r = rng::stream(0, &[STREAM_BATCH, u64::MAX]);
    let (mut mse, mut kl, mut total, mut n) = (0.0, 0.0, 0.0, 0.0);
    for ids in length_buckets(&lengths, cfg.batch_size, &mut r) {
        let crops = crop_batch(data, &ids, model.arch.max_frames, None);
        let mut g = Graph::new();
        let l = batch_loss(model, &mut g, Scope::frozen(&model.params), &crops, None, cfg.kl_weight)?;
        let w = ids.len() as f64;
        mse += g.scalar(l.mse) * w;
        kl += g.scalar(l.kl) * w;
        total += g.scalar(l.total) * w;
        n += w;
    }
    Ok(VaeLogRow {
        epoch: 0,
        mse: mse / n,
        kl: kl / n,
        total: total / n,
    })
}

/// Trains `model` in place on normalized features. Row 0 of the log is the
/// loss before any update; row `e` the mean minibatch loss of epoch `e`.
/// On a non-finite loss the weights of the last finished epoch are restored
/// and an error is returned.
pub fn train_vae(
    model: &mut VaeModel,
    train: &[MotionFeatures],
    cfg: &VaeTrainConfig,
    seed: u64,
) -> Result<Vec<VaeLogRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("VAE training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    for f in train {
        if f.frames() < model.arch.min_frames {
            return Err(Error::InvalidArgument(format!(
                "training motion has {} frames, below the minimum {}",
                f.frames(),
                model.arch.min_frames
            )));
        }
    }
    let mut log = vec![evaluate_vae(model, train, cfg)?];
    let mut opt = OptState::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::new(cfg.lr)
        },
    );
    let lengths: Vec<usize> = train.iter().map(|f| f.frames()).collect();
    let mut last_good = model.params.clone();
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(seed, &[STREAM_BATCH, epoch as u64]);
        let (mut mse, mut kl, mut total, mut n) = (0.0, 0.0, 0.0, 0.0);
        for (bi, ids) in length_buckets(&lengths, cfg.batch_size, &mut r).into_iter().enumerate() {
            let crops = crop_batch(train, &ids, model.arch.max_frames, Some(&mut r));
            let mut er = rng::stream(seed, &[STREAM_EPS, epoch as u64, bi as u64]);
            let eps = Tensor2::new(
                ids.len(),
                model.arch.latent_dim,
                rng::gaussian_vec(&mut er, ids.len() * model.arch.latent_dim),
            )?;
            let grads = {
                let mut g = Graph::new();
                let l = batch_loss(model, &mut g, Scope::trainable(&model.params), &crops, Some(eps), cfg.kl_weight)?;
                let tv = g.scalar(l.total);
                if !tv.is_finite() {
                    model.params = last_good;
                    return Err(Error::Diverged {
                        stage: "vae",
                        epoch,
                        detail: format!("loss {tv} at batch {bi}"),
                    });
                }
                let w = ids.len() as f64;
                mse += g.scalar(l.mse) * w;
                kl += g.scalar(l.kl) * w;
                total += tv * w;
                n += w;
                g.backward(l.total)?
            };
            if let Err(e) = opt.step(&mut model.params, &grads) {
                model.params = last_good;
                return Err(Error::Diverged {
                    stage: "vae",
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
        log::info!("vae epoch {epoch}: mse {:.5} kl {:.3}", mse / n, kl / n);
        log.push(VaeLogRow {
            epoch,
            mse: mse / n,
            kl: kl / n,
            total: total / n,
        });
        last_good = model.params.clone();
    }
    Ok(log)
}
