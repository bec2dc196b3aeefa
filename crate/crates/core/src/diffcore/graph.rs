//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. Nodes that cannot reach a trainable leaf are never
//! visited during the backward pass, so frozen sub-networks cost one forward
//! pass and nothing more.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::params::ParamId;
use super::tensor::{gemm, MatRef, Tensor2};
use crate::error::{shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through `exp`; several times faster than libm's `tanh` here.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u > 20.0 {
        1.0
    } else if u < -20.0 {
        -1.0
    } else {
        let e = (2.0 * u).exp();
        (e - 1.0) / (e + 1.0)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var),
    SumAll(Var),
    MeanAll(Var),
    ColSums(Var),
    RowSums(Var),
    NormalizeRows(Var, Vec<f64>),
    MulConst(Var, Tensor2),
}

struct Node<'a> {
    value: Cow<'a, Tensor2>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor2>,
    leaves: BTreeMap<usize, Tensor2>,
}

impl Gradients {
    /// Gradient of a trainable parameter block, if it was reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor2> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor2> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, v) in other.params {
            match self.params.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.params.insert(k, v);
                }
            }
        }
        for (k, v) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.leaves.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.params.values_mut() {
            t.scale_assign(k);
        }
        for t in self.leaves.values_mut() {
            t.scale_assign(k);
        }
    }
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn check_same(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor2>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.push(Cow::Owned(value), op, needs_grad)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push_owned(t, Op::Leaf, false)
    }

    /// Borrowed constant leaf (frozen weights).
    pub fn constant_ref(&mut self, t: &'a Tensor2) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::leaf`].
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push_owned(t, Op::Leaf, true)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, t: &'a Tensor2, id: ParamId) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(out, Op::MatMul(a, b), ng))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} @ {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor2::zeros(av.rows(), bv.rows());
        gemm(1.0, MatRef::normal(av), MatRef::transposed(bv), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(out, Op::MatMulNT(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        check_same(name, self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(
                name,
                format!("{:?} with row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        let rr = rv.row(0);
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(rr) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(r);
        let op = if mul { Op::MulRow(a, r) } else { Op::AddRow(a, r) };
        Ok(self.push_owned(out, op, ng))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, false)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, true)
    }

    /// Multiplies row `i` of `a` by the scalar `col[i]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err(
                "mul_col",
                format!("{:?} with column {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let k = cv.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push_owned(out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push_owned(out, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push_owned(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push_owned(out, op, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x))),
            Op::Gelu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} {:?} for input {:?}", pv.shape(), xv.shape()),
                ));
            }
        }
        let mut xhat = Tensor2::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (self.value(gamma).row(0), self.value(beta).row(0));
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, g), b) in out.row_mut(i).iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(a);
        self.push_owned(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push_owned(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `(B * seq_len) x d`; rows are grouped into `B`
    /// independent sequences of equal length and attention never crosses a
    /// sequence boundary.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        if kv.shape() != (n, d) || vv.shape() != (n, d) {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if seq_len == 0 || n % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{n} rows, seq_len {seq_len}, {d} dims, {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batches = n / seq_len;
        let s2 = seq_len * seq_len;
        let mut probs = vec![0.0; batches * heads * s2];
        let mut out = Tensor2::zeros(n, d);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let od = out.data_mut();
        for b in 0..batches {
            let base = b * seq_len;
            for h in 0..heads {
                let c0 = h * dh;
                let p_off = (b * heads + h) * s2;
                let pb = &mut probs[p_off..p_off + s2];
                for i in 0..seq_len {
                    let qi = &qd[(base + i) * d + c0..(base + i) * d + c0 + dh];
                    let prow = &mut pb[i * seq_len..(i + 1) * seq_len];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut od[(base + i) * d + c0..(base + i) * d + c0 + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        axpy(pj, vj, orow);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push_owned(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, av.rows()),
            ));
        }
        let out = av.slice_rows(start, len);
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::SliceRows(a, start), ng))
    }

    /// Rows `idx[0], idx[1], ...` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", av.rows())));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor2::new(idx.len(), c, data)?;
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, av.cols()),
            ));
        }
        let out = Tensor2::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} cols vs {cols}", pv.cols()),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let out = Tensor2::new(rows, cols, data)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("{} rows vs {rows}", pv.rows()),
                ));
            }
            cols += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push_owned(out, Op::Transpose(a), ng)
    }

    /// Row-major reshape (no data movement).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::Reshape(a), ng))
    }

    /// Tiles a `1 x c` row into `n x c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(shape_err("repeat_rows", format!("{:?}", av.shape())));
        }
        let out = Tensor2::from_fn(n, av.cols(), |_, c| av.get(0, c));
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::RepeatRows(a), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push_owned(Tensor2::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let ng = self.ng(a);
        self.push_owned(Tensor2::scalar(s), Op::MeanAll(a), ng)
    }

    /// Sum over rows: `n x c -> 1 x c`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let out = col_sums(self.value(a));
        let ng = self.ng(a);
        self.push_owned(out, Op::ColSums(a), ng)
    }

    /// Sum over columns: `n x c -> n x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor2::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        let ng = self.ng(a);
        self.push_owned(out, Op::RowSums(a), ng)
    }

    /// Scales each row to unit L2 norm. Rows of zero norm are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let n = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(crate::Error::InvalidArgument(format!(
                    "cannot normalize row {i} with norm {n}"
                )));
            }
            out.row_mut(i).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::NormalizeRows(a, norms), ng))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor2) -> Result<Var> {
        check_same("mul_const", self.value(a), &mask)?;
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.ng(a);
        Ok(self.push_owned(out, Op::MulConst(a, mask), ng))
    }

    /// Runs the backward pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor2,
        grads: &mut [Option<Tensor2>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[idx];
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| -> &Tensor2 { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(idx, g);
            }
            Op::Param(id) => match out.params.get_mut(id) {
                Some(t) => t.add_assign(&g),
                None => {
                    out.params.insert(*id, g);
                }
            },
            Op::MatMul(a, b) => {
                if ng(a) {
                    let bv = val(b);
                    let mut da = Tensor2::zeros(g.rows(), bv.rows());
                    gemm(1.0, MatRef::normal(&g), MatRef::transposed(bv), 0.0, &mut da);
                    acc(grads, *a, da);
                }
                if ng(b) {
                    let av = val(a);
                    let mut db = Tensor2::zeros(av.cols(), g.cols());
                    gemm(1.0, MatRef::transposed(av), MatRef::normal(&g), 0.0, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                if ng(a) {
                    let bv = val(b);
                    let mut da = Tensor2::zeros(g.rows(), bv.cols());
                    gemm(1.0, MatRef::normal(&g), MatRef::normal(bv), 0.0, &mut da);
                    acc(grads, *a, da);
                }
                if ng(b) {
                    let av = val(a);
                    let mut db = Tensor2::zeros(g.cols(), av.cols());
                    gemm(1.0, MatRef::transposed(&g), MatRef::normal(av), 0.0, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if ng(a) {
                    acc(grads, *a, g.clone());
                }
                if ng(b) {
                    acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if ng(a) {
                    acc(grads, *a, g.clone());
                }
                if ng(b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if ng(a) {
                    acc(grads, *a, g.zip_map(val(b), |x, y| x * y));
                }
                if ng(b) {
                    acc(grads, *b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(b);
                if ng(a) {
                    acc(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if ng(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = &node.value;
                    let t = Tensor2::from_fn(g.rows(), g.cols(), |r, c| {
                        -g.get(r, c) * q.get(r, c) / bv.get(r, c)
                    });
                    acc(grads, *b, t);
                }
            }
            Op::AddRow(a, r) => {
                if ng(r) {
                    acc(grads, *r, col_sums(&g));
                }
                if ng(a) {
                    acc(grads, *a, g);
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(r);
                if ng(r) {
                    let av = val(a);
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((d, x), y) in dr.row_mut(0).iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *d += x * y;
                        }
                    }
                    acc(grads, *r, dr);
                }
                if ng(a) {
                    let mut da = g;
                    for i in 0..da.rows() {
                        for (d, y) in da.row_mut(i).iter_mut().zip(rv.row(0)) {
                            *d *= y;
                        }
                    }
                    acc(grads, *a, da);
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(c);
                if ng(c) {
                    let av = val(a);
                    let dc = Tensor2::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    });
                    acc(grads, *c, dc);
                }
                if ng(a) {
                    let mut da = g;
                    for i in 0..da.rows() {
                        let k = cv.get(i, 0);
                        da.row_mut(i).iter_mut().for_each(|x| *x *= k);
                    }
                    acc(grads, *a, da);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                acc(grads, *a, g.map(|x| x * k));
            }
            Op::AddScalar(a) => acc(grads, *a, g),
            Op::Gelu(a) => {
                let t = g.zip_map(val(a), |gy, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = fast_tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                });
                acc(grads, *a, t);
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Ln(a) => acc(grads, *a, g.zip_map(val(a), |x, y| x / y)),
            Op::Sqrt(a) => acc(grads, *a, g.zip_map(&node.value, |x, y| x / (2.0 * y))),
            Op::Square(a) => acc(grads, *a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if ng(beta) {
                    acc(grads, *beta, col_sums(&g));
                }
                if ng(gamma) {
                    acc(grads, *gamma, col_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if ng(x) {
                    let gv = val(gamma);
                    let c = g.cols() as f64;
                    let mut dx = Tensor2::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dxhat: Vec<f64> =
                            g.row(i).iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        let inv = inv_std[i];
                        for ((o, dh), xh) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xhat.row(i)) {
                            *o = inv / c * (c * dh - s1 - xh * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g;
                for i in 0..dx.rows() {
                    let dot: f64 = dx.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (d, yy) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d = yy * (*d - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g;
                for i in 0..dx.rows() {
                    let s: f64 = dx.row(i).iter().sum();
                    for (d, yy) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d -= yy.exp() * s;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let (n, d) = qv.shape();
                let (s, h_n) = (*seq_len, *heads);
                let dh = d / h_n;
                let scale = 1.0 / (dh as f64).sqrt();
                let s2 = s * s;
                let mut dq = ng(q).then(|| vec![0.0; n * d]);
                let mut dk = ng(k).then(|| vec![0.0; n * d]);
                let mut dv = ng(v).then(|| vec![0.0; n * d]);
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut ds = vec![0.0; s];
                let row = |r: usize, c0: usize| r * d + c0..r * d + c0 + dh;
                for b in 0..n / s {
                    let base = b * s;
                    for h in 0..h_n {
                        let c0 = h * dh;
                        let p_off = (b * h_n + h) * s2;
                        let pb = &probs[p_off..p_off + s2];
                        for i in 0..s {
                            let gi = &gd[row(base + i, c0)];
                            let prow = &pb[i * s..(i + 1) * s];
                            if let Some(dv) = dv.as_mut() {
                                for (j, &pj) in prow.iter().enumerate() {
                                    axpy(pj, gi, &mut dv[row(base + j, c0)]);
                                }
                            }
                            if dq.is_none() && dk.is_none() {
                                continue;
                            }
                            // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                            let mut acc_dot = 0.0;
                            for (j, x) in ds.iter_mut().enumerate() {
                                *x = dot(gi, &vd[row(base + j, c0)]);
                                acc_dot += *x * prow[j];
                            }
                            for (x, &pj) in ds.iter_mut().zip(prow) {
                                *x = pj * (*x - acc_dot) * scale;
                            }
                            if let Some(dq) = dq.as_mut() {
                                let dqi = &mut dq[row(base + i, c0)];
                                for (j, &x) in ds.iter().enumerate() {
                                    axpy(x, &kd[row(base + j, c0)], dqi);
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                let qi = &qd[row(base + i, c0)];
                                for (j, &x) in ds.iter().enumerate() {
                                    axpy(x, qi, &mut dk[row(base + j, c0)]);
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = buf {
                        acc(grads, *var, Tensor2::new(n, d, buf).expect("attention grad"));
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(a);
                let mut da = Tensor2::zeros(av.rows(), av.cols());
                let c = av.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let av = val(a);
                let mut da = Tensor2::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, x) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let av = val(a);
                let mut da = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let rows = val(p).rows();
                    if ng(p) {
                        acc(grads, *p, g.slice_rows(r0, rows));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = val(p).cols();
                    if ng(p) {
                        let t = Tensor2::from_fn(g.rows(), cols, |r, c| g.get(r, c0 + c));
                        acc(grads, *p, t);
                    }
                    c0 += cols;
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                acc(grads, *a, g.reshape(r, c).expect("reshape grad"));
            }
            Op::RepeatRows(a) => acc(grads, *a, col_sums(&g)),
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                acc(grads, *a, Tensor2::full(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = val(a).shape();
                acc(grads, *a, Tensor2::full(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::ColSums(a) => {
                let (r, c) = val(a).shape();
                acc(grads, *a, Tensor2::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::RowSums(a) => {
                let (r, c) = val(a).shape();
                acc(grads, *a, Tensor2::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = g;
                for i in 0..dx.rows() {
                    let dot: f64 = dx.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    let n = norms[i];
                    for (d, yy) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d = (*d - yy * dot) / n;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::MulConst(a, m) => acc(grads, *a, g.zip_map(m, |x, y| x * y)),
        }
    }
}

fn acc(grads: &mut [Option<Tensor2>], v: Var, t: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn col_sums(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, t.cols());
    for i in 0..t.rows() {
        for (o, x) in out.row_mut(0).iter_mut().zip(t.row(i)) {
            *o += x;
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}
