//! Latent autoencoder whose code space is aligned with caption embeddings,
//! plus the inference-time realignment `unproject(project(z))`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    AdamWConfig, DropoutStream, Graph, Linear, OptState, ParamStore, Scope, StackConfig, Tensor2,
    TransformerStack, Var,
};
use crate::error::{Error, Result};
use crate::rng;

const STREAM_INIT: u64 = 0xE0;
const STREAM_BATCH: u64 = 0xE1;
const STREAM_DROPOUT: u64 = 0xE2;

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorArch {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for ProjectorArch {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            hidden_dim: 128,
            dropout: 0.1,
        }
    }
}

impl ProjectorArch {
    pub fn full_scale(latent_dim: usize, embed_dim: usize) -> Self {
        Self {
            latent_dim,
            embed_dim,
            layers: 9,
            heads: 4,
            hidden_dim: 1024,
            dropout: 0.1,
        }
    }

    fn stack(&self) -> StackConfig {
        StackConfig::new(self.layers, self.heads, self.hidden_dim).with_dropout(self.dropout)
    }
}

/// Encoder `M -> E` and decoder `E -> M`, each a single-token transformer.
#[derive(Clone, Debug)]
pub struct Projector {
    pub arch: ProjectorArch,
    pub params: ParamStore,
    enc_in: Linear,
    enc: TransformerStack,
    enc_out: Linear,
    dec_in: Linear,
    dec: TransformerStack,
    dec_out: Linear,
}

impl Projector {
    pub fn new(arch: ProjectorArch, seed: u64) -> Result<Self> {
        arch.stack().validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[STREAM_INIT]);
        let h = arch.hidden_dim;
        let enc_in = Linear::new(&mut params, "proj.enc_in", arch.latent_dim, h, &mut r);
        let enc = TransformerStack::new(&mut params, "proj.enc", arch.stack(), &mut r)?;
        let enc_out = Linear::new(&mut params, "proj.enc_out", h, arch.embed_dim, &mut r);
        let dec_in = Linear::new(&mut params, "proj.dec_in", arch.embed_dim, h, &mut r);
        let dec = TransformerStack::new(&mut params, "proj.dec", arch.stack(), &mut r)?;
        let dec_out = Linear::new(&mut params, "proj.dec_out", h, arch.latent_dim, &mut r);
        Ok(Self {
            arch,
            params,
            enc_in,
            enc,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    fn check_cols(&self, g: &Graph<'_>, x: Var, want: usize, op: &'static str) -> Result<()> {
        let cols = g.value(x).cols();
        if cols != want {
            return Err(Error::Shape {
                op,
                detail: format!("input has {cols} dims, expected {want}"),
            });
        }
        Ok(())
    }

    /// `B x M` latents to `B x E` codes.
    pub fn project_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        z: Var,
        dropout: Option<&mut DropoutStream>,
    ) -> Result<Var> {
        self.check_cols(g, z, self.arch.latent_dim, "project")?;
        let h = self.enc_in.forward(g, s, z)?;
        let h = self.enc.add_positions(g, h, 1)?;
        let h = self.enc.forward(g, s, h, 1, dropout)?;
        self.enc_out.forward(g, s, h)
    }

    /// `B x E` codes to `B x M` latents.
    pub fn unproject_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        p: Var,
        dropout: Option<&mut DropoutStream>,
    ) -> Result<Var> {
        self.check_cols(g, p, self.arch.embed_dim, "unproject")?;
        let h = self.dec_in.forward(g, s, p)?;
        let h = self.dec.add_positions(g, h, 1)?;
        let h = self.dec.forward(g, s, h, 1, dropout)?;
        self.dec_out.forward(g, s, h)
    }

    pub fn project(&self, z: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = self.project_graph(&mut g, Scope::frozen(&self.params), zv, None)?;
        Ok(g.value(p).clone())
    }

    pub fn unproject(&self, p: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let z = self.unproject_graph(&mut g, Scope::frozen(&self.params), pv, None)?;
        Ok(g.value(z).clone())
    }

    /// `unproject(project(z))` in eval mode.
    pub fn realign(&self, z: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let s = Scope::frozen(&self.params);
        let p = self.project_graph(&mut g, s, zv, None)?;
        let back = self.unproject_graph(&mut g, s, p, None)?;
        Ok(g.value(back).clone())
    }
}

/// Mean over rows of `1 - cos(z_proj_i, c_i)`.
pub fn alignment_loss(g: &mut Graph<'_>, z_proj: Var, c: Var) -> Result<Var> {
    let (b, e) = g.value(z_proj).shape();
    if g.value(c).shape() != (b, e) {
        return Err(Error::Shape {
            op: "alignment_loss",
            detail: format!("codes {:?} vs embeddings {:?}", (b, e), g.value(c).shape()),
        });
    }
    for i in 0..b {
        for (what, v) in [("projected latent", z_proj), ("caption embedding", c)] {
            if g.value(v).row(i).iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidArgument(format!("{what} row {i} has zero norm")));
            }
        }
    }
    let zn = g.normalize_rows(z_proj)?;
    let cn = g.normalize_rows(c)?;
    let prod = g.mul(zn, cn)?;
    let cos = g.sum_all(prod);
    let mean = g.scale(cos, -1.0 / b as f64);
    Ok(g.add_scalar(mean, 1.0))
}

/// `mean_i ||z_i - z_hat_i||^2`.
pub fn reconstruction_loss(g: &mut Graph<'_>, z: Var, z_hat: Var) -> Result<Var> {
    let b = g.value(z).rows();
    let d = g.sub(z, z_hat)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / b.max(1) as f64))
}

/// Sum over dimensions of `KL(P_d || Q_d)` between diagonal Gaussians fitted
/// by batch moments, `P` from `gt` and `Q` from `pred`.
pub fn variance_loss(g: &mut Graph<'_>, gt: Var, pred: Var) -> Result<Var> {
    let (b, m) = g.value(gt).shape();
    if g.value(pred).shape() != (b, m) {
        return Err(Error::Shape {
            op: "variance_loss",
            detail: format!("gt {:?} vs pred {:?}", (b, m), g.value(pred).shape()),
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance loss needs a batch of at least 2, got {b}"
        )));
    }
    let (mu_p, var_p) = moments(g, gt)?;
    let (mu_q, var_q) = moments(g, pred)?;
    let ln_p = g.ln(var_p);
    let ln_q = g.ln(var_q);
    let half_log_ratio = {
        let d = g.sub(ln_q, ln_p)?;
        g.scale(d, 0.5)
    };
    let dm = g.sub(mu_p, mu_q)?;
    let dm2 = g.square(dm);
    let num = g.add(var_p, dm2)?;
    let two_q = g.scale(var_q, 2.0);
    let frac = g.div(num, two_q)?;
    let per_dim = g.add(half_log_ratio, frac)?;
    let total = g.sum_all(per_dim);
    Ok(g.add_scalar(total, -0.5 * m as f64))
}

/// Column mean and floored population variance, each `1 x M`.
fn moments(g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
    let (b, m) = g.value(x).shape();
    let sums = g.col_sums(x);
    let mu = g.scale(sums, 1.0 / b as f64);
    let centered = {
        let neg = g.scale(mu, -1.0);
        g.add_row(x, neg)?
    };
    let sq = g.square(centered);
    let ss = g.col_sums(sq);
    let var = g.scale(ss, 1.0 / b as f64);
    let lift = Tensor2::from_fn(1, m, |_, c| (VARIANCE_FLOOR - g.value(var).get(0, c)).max(0.0));
    let lift = g.constant(lift);
    let var = g.add(var, lift)?;
    Ok((mu, var))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "noALIGN")]
    NoAlign,
    #[serde(rename = "noREC")]
    NoRec,
    #[serde(rename = "noKL")]
    NoKl,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoAlign, Ablation::NoRec, Ablation::NoKl];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoAlign => "noALIGN",
            Ablation::NoRec => "noREC",
            Ablation::NoKl => "noKL",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "noalign" => Ok(Ablation::NoAlign),
            "norec" => Ok(Ablation::NoRec),
            "nokl" | "novar" => Ok(Ablation::NoKl),
            _ => Err(Error::Parse(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorTrainConfig {
    pub lambda_align: f64,
    pub lambda_rec: f64,
    pub lambda_var: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Anneal the learning rate to zero along a half cosine over the run.
    #[serde(default)]
    pub cosine_decay: bool,
    pub ablation: BTreeSet<Ablation>,
}

impl Default for ProjectorTrainConfig {
    fn default() -> Self {
        Self {
            lambda_align: 2.1591,
            lambda_rec: 4.7036,
            lambda_var: 0.05960,
            lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 300,
            cosine_decay: true,
            ablation: BTreeSet::new(),
        }
    }
}

impl ProjectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align < 0.0 || self.lambda_rec < 0.0 || self.lambda_var < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("projector batch_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Weights `(align, rec, var)` after ablation zeroing.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        let on = |a: Ablation, w: f64| if self.ablation.contains(&a) { 0.0 } else { w };
        (
            on(Ablation::NoAlign, self.lambda_align),
            on(Ablation::NoRec, self.lambda_rec),
            on(Ablation::NoKl, self.lambda_var),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorLossVars {
    pub total: Var,
    pub align: Var,
    pub rec: Var,
    pub var: Var,
}

/// Weighted objective on one batch of latents `z` (`B x M`) with paired
/// caption embeddings `c` (`B x E`).
pub fn projector_loss<'a>(
    g: &mut Graph<'a>,
    p: &Projector,
    s: Scope<'a>,
    z: &Tensor2,
    c: &Tensor2,
    weights: (f64, f64, f64),
    mut dropout: Option<&mut DropoutStream>,
) -> Result<ProjectorLossVars> {
    let zv = g.constant(z.clone());
    let cv = g.constant(c.clone());
    let code = p.project_graph(g, s, zv, dropout.as_deref_mut())?;
    let z_hat = p.unproject_graph(g, s, code, dropout)?;
    let align = alignment_loss(g, code, cv)?;
    let rec = reconstruction_loss(g, zv, z_hat)?;
    let var = variance_loss(g, zv, z_hat)?;
    let a = g.scale(align, weights.0);
    let r = g.scale(rec, weights.1);
    let v = g.scale(var, weights.2);
    let ar = g.add(a, r)?;
    let total = g.add(ar, v)?;
    Ok(ProjectorLossVars { total, align, rec, var })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorLogRow {
    pub epoch: usize,
    pub total: f64,
    pub align: f64,
    pub rec: f64,
    pub var: f64,
}

/// Minibatches of at least two items: a trailing singleton joins the
/// previous batch.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

/// Trains on fixed VAE latents (`N x M`) with paired caption embeddings
/// (`N x E`). With every loss term ablated nothing is optimized and the
/// weights are left untouched.
pub fn train_projector(
    p: &mut Projector,
    latents: &Tensor2,
    captions: &Tensor2,
    cfg: &ProjectorTrainConfig,
    seed: u64,
) -> Result<Vec<ProjectorLogRow>> {
    cfg.validate()?;
    let n = latents.rows();
    if n < 2 || captions.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "need at least two latents with paired captions, got {n} and {}",
            captions.rows()
        )));
    }
    let weights = cfg.effective_weights();
    let active = weights != (0.0, 0.0, 0.0);
    let mut opt = OptState::new(
        &p.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::new(cfg.lr)
        },
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = p.params.clone();
    for epoch in 1..=cfg.epochs {
        if cfg.cosine_decay {
            let frac = (epoch - 1) as f64 / cfg.epochs as f64;
            opt.config.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let mut r = rng::stream(seed, &[STREAM_BATCH, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut order);
        let mut drop = DropoutStream::new(seed, &[STREAM_DROPOUT, epoch as u64]);
        let mut sums = [0.0; 4];
        for (bi, ids) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let z = Tensor2::from_fn(ids.len(), latents.cols(), |r, c| latents.get(ids[r], c));
            let c = Tensor2::from_fn(ids.len(), captions.cols(), |r, c| captions.get(ids[r], c));
            let mut g = Graph::new();
            let dropout = (p.arch.dropout > 0.0).then_some(&mut drop);
            let l = projector_loss(&mut g, p, Scope::trainable(&p.params), &z, &c, weights, dropout)?;
            let vals = [g.scalar(l.total), g.scalar(l.align), g.scalar(l.rec), g.scalar(l.var)];
            if !vals[0].is_finite() {
                p.params = last_good;
                return Err(Error::Diverged {
                    stage: "projector",
                    epoch,
                    detail: format!(
                        "batch {bi}: total {} (align {}, rec {}, var {})",
                        vals[0], vals[1], vals[2], vals[3]
                    ),
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * ids.len() as f64;
            }
            if active {
                let grads = g.backward(l.total)?;
                opt.step(&mut p.params, &grads)?;
            }
        }
        let row = ProjectorLogRow {
            epoch,
            total: sums[0] / n as f64,
            align: sums[1] / n as f64,
            rec: sums[2] / n as f64,
            var: sums[3] / n as f64,
        };
        if epoch % 50 == 0 || epoch == cfg.epochs {
            log::info!(
                "projector epoch {epoch}: total {:.5} align {:.4} rec {:.5} var {:.4}",
                row.total,
                row.align,
                row.rec,
                row.var
            );
        }
        log.push(row);
        last_good.load_from(&p.params)?;
    }
    Ok(log)
}

/// Mean paired cosine, mean mismatched cosine and mean relative
/// reconstruction error `||z_hat - z|| / ||z||` on held-out data. Mismatched
/// pairs use every other item whose caption differs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub paired_cos: f64,
    pub mismatched_cos: f64,
    pub margin: f64,
    pub rel_rec_error: f64,
}

pub fn alignment_report(
    p: &Projector,
    latents: &Tensor2,
    captions: &Tensor2,
    caption_ids: &[usize],
) -> Result<AlignmentReport> {
    let n = latents.rows();
    if captions.rows() != n || caption_ids.len() != n || n < 2 {
        return Err(Error::InvalidArgument("alignment report needs at least two paired items".into()));
    }
    let code = p.project(latents)?;
    let back = p.unproject(&code)?;
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    };
    let mut paired = 0.0;
    let (mut mis, mut mis_n) = (0.0, 0usize);
    let mut rel = 0.0;
    for i in 0..n {
        paired += cos(code.row(i), captions.row(i));
        for j in 0..n {
            if caption_ids[j] != caption_ids[i] {
                mis += cos(code.row(i), captions.row(j));
                mis_n += 1;
            }
        }
        let err: f64 = back
            .row(i)
            .iter()
            .zip(latents.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = latents.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        rel += err / norm.max(1e-300);
    }
    let paired_cos = paired / n as f64;
    let mismatched_cos = if mis_n > 0 { mis / mis_n as f64 } else { 0.0 };
    Ok(AlignmentReport {
        paired_cos,
        mismatched_cos,
        margin: paired_cos - mismatched_cos,
        rel_rec_error: rel / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn tiny() -> ProjectorArch {
        ProjectorArch {
            latent_dim: 3,
            embed_dim: 4,
            layers: 2,
            heads: 2,
            hidden_dim: 8,
            dropout: 0.0,
        }
    }

    fn align_of(z: Vec<f64>, c: Vec<f64>) -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(Tensor2::row_vector(z));
        let cv = g.constant(Tensor2::row_vector(c));
        let l = alignment_loss(&mut g, zv, cv).unwrap();
        g.scalar(l)
    }

    #[test]
    fn alignment_special_values() {
        let c = vec![0.6, 0.8, 0.0];
        assert!(align_of(vec![1.2, 1.6, 0.0], c.clone()).abs() < 1e-12);
        assert!((align_of(vec![0.8, -0.6, 0.0], c.clone()) - 1.0).abs() < 1e-12);
        assert!((align_of(vec![-0.6, -0.8, 0.0], c.clone()) - 2.0).abs() < 1e-12);
        let mut g = Graph::new();
        let zv = g.constant(Tensor2::zeros(1, 3));
        let cv = g.constant(Tensor2::row_vector(c));
        assert!(alignment_loss(&mut g, zv, cv).is_err());
    }

    #[test]
    fn reconstruction_special_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor2::from_fn(2, 3, |r, c| (r + c) as f64));
        let l = reconstruction_loss(&mut g, z, z).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let a = g.constant(Tensor2::row_vector(vec![0.0, 0.0]));
        let b = g.constant(Tensor2::row_vector(vec![0.0, 1.0]));
        let l = reconstruction_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn variance_closed_form() {
        let mut g = Graph::new();
        let gt = g.constant(Tensor2::from_rows(&[vec![-1.0], vec![1.0]]).unwrap());
        let pred = g.constant(Tensor2::from_rows(&[vec![0.0], vec![2.0]]).unwrap());
        let l = variance_loss(&mut g, gt, pred).unwrap();
        assert!((g.scalar(l) - 0.5).abs() < 1e-12);
        let same = variance_loss(&mut g, gt, gt).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let one = g.constant(Tensor2::row_vector(vec![1.0]));
        assert!(variance_loss(&mut g, one, one).is_err());
    }

    #[test]
    fn project_is_deterministic_and_finite() {
        let p = Projector::new(tiny(), 1).unwrap();
        let z = Tensor2::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        let a = p.project(&z).unwrap();
        assert_eq!(a, p.project(&z).unwrap());
        assert!(a.all_finite());
        assert_eq!(p.realign(&z).unwrap(), p.unproject(&a).unwrap());
        assert!(p.project(&Tensor2::zeros(1, 4)).is_err());
    }

    #[test]
    fn weights_are_linear() {
        let p = Projector::new(tiny(), 2).unwrap();
        let z = Tensor2::from_fn(4, 3, |r, c| ((r + 2 * c) as f64).cos());
        let c = Tensor2::from_fn(4, 4, |r, c| ((r * c) as f64 + 0.5).sin());
        let cfg = ProjectorTrainConfig::default();
        let w = cfg.effective_weights();
        let mut g = Graph::new();
        let s = Scope::frozen(&p.params);
        let l = projector_loss(&mut g, &p, s, &z, &c, w, None).unwrap();
        let by_hand = w.0 * g.scalar(l.align) + w.1 * g.scalar(l.rec) + w.2 * g.scalar(l.var);
        assert!((g.scalar(l.total) - by_hand).abs() < 1e-12);
        let l2 = projector_loss(&mut g, &p, s, &z, &c, (2.0 * w.0, 2.0 * w.1, 2.0 * w.2), None).unwrap();
        assert_eq!(g.scalar(l2.total), 2.0 * g.scalar(l.total));
    }

    #[test]
    fn full_ablation_changes_nothing() {
        let mut p = Projector::new(tiny(), 3).unwrap();
        let before = p.params.hash();
        let z = Tensor2::from_fn(6, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let c = Tensor2::from_fn(6, 4, |r, c| ((r + c) as f64).sin() + 0.1);
        let cfg = ProjectorTrainConfig {
            ablation: Ablation::ALL.into_iter().collect(),
            batch_size: 4,
            epochs: 3,
            ..Default::default()
        };
        let log = train_projector(&mut p, &z, &c, &cfg, 1).unwrap();
        assert!(log.iter().all(|r| r.total == 0.0));
        assert_eq!(p.params.hash(), before);
    }

    #[test]
    fn training_improves_and_replays() {
        let z = Tensor2::from_fn(12, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin());
        let c = Tensor2::from_fn(12, 4, |r, c| ((r % 3 + c) as f64).cos() + 0.2);
        let cfg = ProjectorTrainConfig {
            batch_size: 4,
            epochs: 30,
            lr: 3e-3,
            ..Default::default()
        };
        let mut a = Projector::new(tiny(), 4).unwrap();
        let la = train_projector(&mut a, &z, &c, &cfg, 9).unwrap();
        let mut b = Projector::new(tiny(), 4).unwrap();
        train_projector(&mut b, &z, &c, &cfg, 9).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        assert!(la.last().unwrap().total < la[0].total);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let p = Projector::new(tiny(), 5).unwrap();
        let z = Tensor2::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.9).sin());
        let c = Tensor2::from_fn(4, 4, |r, c| ((r + 3 * c) as f64).cos());
        let w = ProjectorTrainConfig::default().effective_weights();
        let rep = grad_check(&p.params, 1e-5, |g, s| {
            Ok(projector_loss(g, &p, s, &z, &c, w, None)?.total)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.label().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
