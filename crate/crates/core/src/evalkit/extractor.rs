//! Contrastive text-motion feature extractor used by every metric.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    AdamWConfig, Graph, Linear, Mlp, OptState, ParamId, ParamStore, Scope, StackConfig, Tensor2,
    TransformerStack, Var,
};
use crate::error::{Error, Result};
use crate::motion::MotionFeatures;
use crate::rng;
use crate::vae::{crop_batch, length_buckets};

const STREAM_INIT: u64 = 0xF0;
const STREAM_BATCH: u64 = 0xF1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorArch {
    pub feature_dim: usize,
    pub text_dim: usize,
    pub out_dim: usize,
    pub patch_frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub max_frames: usize,
}

impl Default for ExtractorArch {
    fn default() -> Self {
        Self {
            feature_dim: 92,
            text_dim: 64,
            out_dim: 32,
            patch_frames: 4,
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            max_frames: 119,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            temperature: 0.07,
        }
    }
}

/// Motion and text towers ending in unit-norm `F`-vectors.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub arch: ExtractorArch,
    pub params: ParamStore,
    in_proj: Linear,
    cls: ParamId,
    encoder: TransformerStack,
    motion_head: Linear,
    text_head: Mlp,
}

impl FeatureExtractor {
    pub fn new(arch: ExtractorArch, seed: u64) -> Result<Self> {
        let stack = StackConfig::new(arch.layers, arch.heads, arch.hidden_dim);
        stack.validate()?;
        if arch.patch_frames == 0 || arch.out_dim == 0 {
            return Err(Error::InvalidArgument("extractor dims must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[STREAM_INIT]);
        let h = arch.hidden_dim;
        let in_proj = Linear::new(&mut params, "ext.in_proj", arch.patch_frames * arch.feature_dim, h, &mut r);
        let cls = params.add_normal("ext.cls", 1, h, 0.02, &mut r);
        let encoder = TransformerStack::new(&mut params, "ext.encoder", stack, &mut r)?;
        let motion_head = Linear::new(&mut params, "ext.motion_head", h, arch.out_dim, &mut r);
        let text_head = Mlp::new(&mut params, "ext.text_head", arch.text_dim, h, arch.out_dim, &mut r);
        Ok(Self {
            arch,
            params,
            in_proj,
            cls,
            encoder,
            motion_head,
            text_head,
        })
    }

    /// Unit-norm features for equal-length normalized motions, `B x F`.
    pub fn motion_graph<'a>(&self, g: &mut Graph<'a>, s: Scope<'a>, batch: &[&Tensor2]) -> Result<Var> {
        let frames = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty extractor batch".into()))?
            .rows();
        let p = self.arch.patch_frames;
        let d = self.arch.feature_dim;
        let t = frames.div_ceil(p);
        let mut data = vec![0.0; batch.len() * t * p * d];
        for (i, x) in batch.iter().enumerate() {
            if x.shape() != (frames, d) {
                return Err(Error::Shape {
                    op: "extract_motion",
                    detail: format!("expected {frames} x {d}, got {:?}", x.shape()),
                });
            }
            let off = i * t * p * d;
            data[off..off + frames * d].copy_from_slice(x.data());
        }
        let patches = g.constant(Tensor2::new(batch.len() * t, p * d, data)?);
        let h = self.in_proj.forward(g, s, patches)?;
        let cls = s.w(g, self.cls);
        let all = g.concat_rows(&[cls, h])?;
        let idx: Vec<usize> = (0..batch.len())
            .flat_map(|i| std::iter::once(0).chain((0..t).map(move |k| 1 + i * t + k)))
            .collect();
        let tokens = g.gather_rows(all, &idx)?;
        let tokens = self.encoder.add_positions(g, tokens, t + 1)?;
        let out = self.encoder.forward(g, s, tokens, t + 1, None)?;
        let heads: Vec<usize> = (0..batch.len()).map(|i| i * (t + 1)).collect();
        let pooled = g.gather_rows(out, &heads)?;
        let f = self.motion_head.forward(g, s, pooled)?;
        g.normalize_rows(f)
    }

    /// Unit-norm features for caption embeddings, `B x F`.
    pub fn text_graph<'a>(&self, g: &mut Graph<'a>, s: Scope<'a>, text: Var) -> Result<Var> {
        let f = self.text_head.forward(g, s, text)?;
        g.normalize_rows(f)
    }

    /// Features for motions of any valid lengths, batched by length. Motions
    /// longer than `max_frames` are cut to their first `max_frames` frames.
    pub fn motion_features(&self, motions: &[&Tensor2]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(motions.len(), self.arch.out_dim);
        let cut: Vec<Tensor2> = motions
            .iter()
            .map(|m| {
                if m.rows() > self.arch.max_frames {
                    m.slice_rows(0, self.arch.max_frames)
                } else {
                    (*m).clone()
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..cut.len()).collect();
        order.sort_by_key(|&i| cut[i].rows());
        for group in order.chunk_by(|&a, &b| cut[a].rows() == cut[b].rows()) {
            for chunk in group.chunks(64) {
                let batch: Vec<&Tensor2> = chunk.iter().map(|&i| &cut[i]).collect();
                let mut g = Graph::new();
                let f = self.motion_graph(&mut g, Scope::frozen(&self.params), &batch)?;
                for (k, &i) in chunk.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(g.value(f).row(k));
                }
            }
        }
        out.ensure_finite("motion features")?;
        Ok(out)
    }

    pub fn text_features(&self, embeddings: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let t = g.constant(embeddings.clone());
        let f = self.text_graph(&mut g, Scope::frozen(&self.params), t)?;
        Ok(g.value(f).clone())
    }
}

/// Symmetric cross-entropy over in-batch cosine logits `m t^T / tau`.
pub fn contrastive_loss(g: &mut Graph<'_>, motion: Var, text: Var, temperature: f64) -> Result<Var> {
    let b = g.value(motion).rows();
    if g.value(text).rows() != b || b == 0 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            detail: format!("{b} motions vs {} texts", g.value(text).rows()),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let logits = g.matmul_nt(motion, text)?;
    let logits = g.scale(logits, 1.0 / temperature);
    let eye = Tensor2::identity(b);
    let rows = g.log_softmax_rows(logits);
    let rows = g.mul_const(rows, eye.clone())?;
    let rows = g.sum_all(rows);
    let lt = g.transpose(logits);
    let cols = g.log_softmax_rows(lt);
    let cols = g.mul_const(cols, eye)?;
    let cols = g.sum_all(cols);
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, -0.5 / b as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorLogRow {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains both towers on normalized motions paired with caption embeddings.
pub fn train_extractor(
    ext: &mut FeatureExtractor,
    motions: &[MotionFeatures],
    captions: &Tensor2,
    cfg: &ExtractorTrainConfig,
    seed: u64,
) -> Result<Vec<ExtractorLogRow>> {
    if motions.is_empty() || captions.rows() != motions.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching motions and captions, got {} and {}",
            motions.len(),
            captions.rows()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("contrastive batch must hold at least two pairs".into()));
    }
    let mut opt = OptState::new(
        &ext.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::new(cfg.lr)
        },
    );
    let lengths: Vec<usize> = motions.iter().map(|m| m.frames()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(seed, &[STREAM_BATCH, epoch as u64]);
        let (mut total, mut n) = (0.0, 0.0);
        for ids in length_buckets(&lengths, cfg.batch_size, &mut r) {
            if ids.len() < 2 {
                continue;
            }
            let crops = crop_batch(motions, &ids, ext.arch.max_frames, Some(&mut r));
            let text = Tensor2::from_fn(ids.len(), captions.cols(), |r, c| captions.get(ids[r], c));
            let grads = {
                let mut g = Graph::new();
                let s = Scope::trainable(&ext.params);
                let refs: Vec<&Tensor2> = crops.iter().collect();
                let m = ext.motion_graph(&mut g, s, &refs)?;
                let tv = g.constant(text);
                let t = ext.text_graph(&mut g, s, tv)?;
                let loss = contrastive_loss(&mut g, m, t, cfg.temperature)?;
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        stage: "extractor",
                        epoch,
                        detail: format!("loss {lv}"),
                    });
                }
                total += lv * ids.len() as f64;
                n += ids.len() as f64;
                g.backward(loss)?
            };
            opt.step(&mut ext.params, &grads)?;
        }
        if epoch % 10 == 0 || epoch == cfg.epochs {
            log::info!("extractor epoch {epoch}: loss {:.4}", total / n.max(1.0));
        }
        log.push(ExtractorLogRow {
            epoch,
            loss: total / n.max(1.0),
        });
    }
    Ok(log)
}

/// Mean paired cosine minus mean cosine over pairs with differing captions.
pub fn cosine_margin(motion: &Tensor2, text: &Tensor2, caption_ids: &[usize]) -> f64 {
    let n = motion.rows();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let paired = (0..n).map(|i| dot(motion.row(i), text.row(i))).sum::<f64>() / n as f64;
    let (mut mis, mut cnt) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if caption_ids[i] != caption_ids[j] {
                mis += dot(motion.row(i), text.row(j));
                cnt += 1;
            }
        }
    }
    paired - mis / cnt.max(1) as f64
}
