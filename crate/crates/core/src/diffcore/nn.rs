//! Dense layers, layer norm and pre-norm transformer stacks.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, Scope};
use super::tensor::Tensor2;
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, StreamRng};

/// Sinusoidal positional table: `pe[t][2i] = sin(t / 10000^(2i/dim))`,
/// `pe[t][2i+1] = cos(...)`.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<Tensor2> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding needs an even dimension, got {dim}"
        )));
    }
    if length == 0 {
        return Err(Error::InvalidArgument(
            "sinusoidal encoding needs length >= 1".into(),
        ));
    }
    Ok(Tensor2::from_fn(length, dim, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Replayable source of dropout masks keyed by `(seed, path)` and a call counter.
#[derive(Clone, Debug)]
pub struct DropoutStream {
    key: u64,
    counter: u64,
}

impl DropoutStream {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        Self {
            key: rng::derive_key(seed, path),
            counter: 0,
        }
    }

    /// Inverted-dropout mask: kept entries are scaled by `1 / (1 - rate)`.
    pub fn mask(&mut self, rows: usize, cols: usize, rate: f64) -> Tensor2 {
        let mut r = rng::stream(self.key, &[self.counter]);
        self.counter += 1;
        let keep = 1.0 / (1.0 - rate);
        Tensor2::from_fn(rows, cols, |_, _| {
            if rng::uniform(&mut r, 0.0, 1.0) < rate {
                0.0
            } else {
                keep
            }
        })
    }
}

pub(crate) fn apply_dropout(
    g: &mut Graph<'_>,
    x: Var,
    rate: f64,
    train: Option<&mut DropoutStream>,
) -> Result<Var> {
    match train {
        Some(stream) if rate > 0.0 => {
            let (r, c) = g.value(x).shape();
            let mask = stream.mask(r, c, rate);
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// `y = x W + b`, `W` is `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), in_dim, out_dim, std, rng);
        let b = store.add(format!("{name}.b"), Tensor2::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, s: Scope<'a>, x: Var) -> Result<Var> {
        let w = s.w(g, self.w);
        let b = s.w(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor2::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor2::zeros(1, dim)),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, s: Scope<'a>, x: Var) -> Result<Var> {
        let gamma = s.w(g, self.gamma);
        let beta = s.w(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positional {
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub positional: Positional,
    pub long_skip: bool,
}

impl StackConfig {
    pub fn new(layers: usize, heads: usize, hidden_dim: usize) -> Self {
        Self {
            layers,
            heads,
            hidden_dim,
            ffn_mult: 2,
            dropout_rate: 0.1,
            activation: Activation::Gelu,
            positional: Positional::Sinusoidal,
            long_skip: false,
        }
    }

    pub fn with_long_skip(mut self, on: bool) -> Self {
        self.long_skip = on;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} must be even for sinusoidal positions",
                self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::InvalidArgument("ffn_mult must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of layers that emit a long skip (`L / 2`).
    pub fn skip_pairs(&self) -> usize {
        if self.long_skip {
            self.layers / 2
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    qkv_w: ParamId,
    q_b: ParamId,
    v_b: ParamId,
    attn_out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer encoder stack with optional U-Net style long skips.
///
/// With `long_skip`, the output of layer `i < L/2` is fused into the input of
/// layer `L-1-i` as `x + W [x ; skip] + b`.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub config: StackConfig,
    blocks: Vec<Block>,
    skip_fuse: Vec<Linear>,
    final_norm: Option<LayerNorm>,
}

impl TransformerStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: StackConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let ffn = d * config.ffn_mult;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Block {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    qkv_w: store.add_normal(
                        format!("{p}.qkv.w"),
                        d,
                        3 * d,
                        (1.0 / d as f64).sqrt(),
                        rng,
                    ),
                    q_b: store.add(format!("{p}.q.b"), Tensor2::zeros(1, d)),
                    v_b: store.add(format!("{p}.v.b"), Tensor2::zeros(1, d)),
                    attn_out: Linear::new(store, &format!("{p}.attn_out"), d, d, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), d, ffn, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), ffn, d, rng),
                }
            })
            .collect();
        let final_norm =
            (config.layers > 0).then(|| LayerNorm::new(store, &format!("{name}.final_ln"), d));
        // Skip fusion weights are created last so a plain stack built from the
        // same seed has identical block weights.
        let skip_fuse = (0..config.skip_pairs())
            .map(|j| Linear::new(store, &format!("{name}.skip{j}"), 2 * d, d, rng))
            .collect();
        Ok(Self {
            config,
            blocks,
            skip_fuse,
            final_norm,
        })
    }

    /// Parameter ids of the skip-fusion layers.
    pub fn skip_params(&self) -> Vec<ParamId> {
        self.skip_fuse.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Adds the sinusoidal table to each of the `rows / seq_len` sequences in `x`.
    pub fn add_positions(&self, g: &mut Graph<'_>, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, cols) = g.value(x).shape();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err(
                "add_positions",
                format!("{rows} rows not a multiple of {seq_len}"),
            ));
        }
        let pe = sinusoidal_pe(seq_len, cols)?;
        let tiled = Tensor2::from_fn(rows, cols, |r, c| pe.get(r % seq_len, c));
        let pe = g.constant(tiled);
        g.add(x, pe)
    }

    /// Runs the stack over `rows / seq_len` independent sequences.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        s: Scope<'a>,
        x: Var,
        seq_len: usize,
        mut train: Option<&mut DropoutStream>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (rows, cols) = g.value(x).shape();
        if cols != cfg.hidden_dim {
            return Err(shape_err(
                "forward_stack",
                format!("tokens have {cols} columns, stack hidden_dim is {}", cfg.hidden_dim),
            ));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err(
                "forward_stack",
                format!("{rows} rows not a multiple of seq_len {seq_len}"),
            ));
        }
        let l = cfg.layers;
        let pairs = self.skip_fuse.len();
        let d = cfg.hidden_dim;
        let mut skips: Vec<Var> = Vec::with_capacity(pairs);
        let mut x = x;
        for (i, blk) in self.blocks.iter().enumerate() {
            let j = l - 1 - i;
            if j < pairs && i > j {
                let cat = g.concat_cols(&[x, skips[j]])?;
                let fused = self.skip_fuse[j].forward(g, s, cat)?;
                x = g.add(x, fused)?;
            }
            let h = blk.ln_attn.forward(g, s, x)?;
            let w = s.w(g, blk.qkv_w);
            let qkv = g.matmul(h, w)?;
            let (qb, vb) = (s.w(g, blk.q_b), s.w(g, blk.v_b));
            let q = g.slice_cols(qkv, 0, d)?;
            let q = g.add_row(q, qb)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let v = g.add_row(v, vb)?;
            let a = g.attention(q, k, v, seq_len, cfg.heads)?;
            let a = blk.attn_out.forward(g, s, a)?;
            let a = apply_dropout(g, a, cfg.dropout_rate, train.as_deref_mut())?;
            x = g.add(x, a)?;

            let h = blk.ln_ff.forward(g, s, x)?;
            let f = blk.ff_in.forward(g, s, h)?;
            let f = g.gelu(f);
            let f = blk.ff_out.forward(g, s, f)?;
            let f = apply_dropout(g, f, cfg.dropout_rate, train.as_deref_mut())?;
            x = g.add(x, f)?;
            if i < pairs {
                skips.push(x);
            }
        }
        match &self.final_norm {
            Some(ln) => ln.forward(g, s, x),
            None => Ok(x),
        }
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, out_dim, rng),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, s: Scope<'a>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, s, x)?;
        let h = g.gelu(h);
        self.second.forward(g, s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_first_row_and_closed_form() {
        let pe = sinusoidal_pe(1, 2).unwrap();
        assert_eq!(pe.data(), &[0.0, 1.0]);
        let pe = sinusoidal_pe(2, 2).unwrap();
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 1) - 1f64.cos()).abs() < 1e-15);
        assert!((pe.get(1, 0) - 0.8415).abs() < 1e-4);
        assert!((pe.get(1, 1) - 0.5403).abs() < 1e-4);
    }

    #[test]
    fn pe_range_and_odd_dim() {
        let pe = sinusoidal_pe(64, 32).unwrap();
        assert!(pe.max_abs() <= 1.0);
        let err = sinusoidal_pe(4, 3).unwrap_err();
        assert!(err.to_string().contains("even"));
    }

    fn tokens(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut r = rng::stream(seed, &[]);
        Tensor2::new(rows, cols, rng::gaussian_vec(&mut r, rows * cols)).unwrap()
    }

    #[test]
    fn zero_layer_stack_is_identity() {
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(
            &mut store,
            "s",
            StackConfig::new(0, 2, 8),
            &mut rng::stream(1, &[]),
        )
        .unwrap();
        let x = tokens(5, 8, 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = stack
            .forward(&mut g, Scope::frozen(&store), xv, 5, None)
            .unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(
            &mut store,
            "s",
            StackConfig::new(1, 2, 8),
            &mut rng::stream(1, &[]),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(tokens(4, 6, 1));
        assert!(stack
            .forward(&mut g, Scope::frozen(&store), xv, 4, None)
            .is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_and_finite() {
        let mut store = ParamStore::new();
        let cfg = StackConfig::new(3, 4, 16).with_long_skip(true);
        let stack = TransformerStack::new(&mut store, "s", cfg, &mut rng::stream(2, &[])).unwrap();
        for seed in 0..100 {
            let x = tokens(6, 16, seed);
            let run = || {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = stack
                    .forward(&mut g, Scope::frozen(&store), xv, 3, None)
                    .unwrap();
                g.value(y).clone()
            };
            let (a, b) = (run(), run());
            assert_eq!(a.data(), b.data());
            assert!(a.all_finite());
        }
    }

    #[test]
    fn zeroed_skip_fusion_reduces_to_plain_stack() {
        let x = tokens(8, 16, 9);
        let mut plain_store = ParamStore::new();
        let plain = TransformerStack::new(
            &mut plain_store,
            "s",
            StackConfig::new(4, 4, 16),
            &mut rng::stream(5, &[]),
        )
        .unwrap();
        let mut skip_store = ParamStore::new();
        let skipped = TransformerStack::new(
            &mut skip_store,
            "s",
            StackConfig::new(4, 4, 16).with_long_skip(true),
            &mut rng::stream(5, &[]),
        )
        .unwrap();
        for id in skipped.skip_params() {
            let t = skip_store.get_mut(id);
            *t = Tensor2::zeros(t.rows(), t.cols());
        }
        let run = |stack: &TransformerStack, store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = stack.forward(&mut g, Scope::frozen(store), xv, 4, None).unwrap();
            g.value(y).clone()
        };
        let a = run(&plain, &plain_store);
        let b = run(&skipped, &skip_store);
        let diff = a.zip_map(&b, |x, y| (x - y).abs()).max_abs();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn dropout_masks_replay() {
        let mut a = DropoutStream::new(3, &[1]);
        let mut b = DropoutStream::new(3, &[1]);
        assert_eq!(a.mask(4, 4, 0.5), b.mask(4, 4, 0.5));
        let m = a.mask(100, 100, 0.1);
        let dropped = m.data().iter().filter(|&&x| x == 0.0).count();
        assert!((800..1200).contains(&dropped));
    }
}
