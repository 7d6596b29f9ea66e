//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Tape`] records every op applied during a forward pass. Values live on
//! the tape; parameters are copied in from a [`ParamStore`] the first time a
//! forward touches them. [`Tape::backward`] walks the tape in reverse and
//! [`Tape::backward_into`] additionally adds the parameter gradients into the
//! store's gradient slots (frozen tensors ignore them).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Op families, used to name failures and to target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    MulScalar,
    AffineScalar,
    Clamp,
    AddRow,
    Gelu,
    Relu,
    LayerNorm,
    Softmax,
    Transpose,
    Attention,
    GatherRows,
    ConcatRows,
    L2NormalizeRows,
    Sum,
    Mean,
    CrossEntropy,
    SmoothL1,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::AffineScalar => "affine_scalar",
            OpKind::Clamp => "clamp",
            OpKind::AddRow => "add_row",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Transpose => "transpose",
            OpKind::Attention => "attention",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SmoothL1 => "smooth_l1",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Leaf, MatMul, Linear, Add, Sub, Mul, Scale, MulScalar, AffineScalar, Clamp, AddRow,
            Gelu, Relu, LayerNorm, Softmax, Transpose, Attention, GatherRows, ConcatRows,
            L2NormalizeRows, Sum, Mean, CrossEntropy, SmoothL1,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AffineScalar(Var, f64),
    Clamp(Var, f64, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        mask: Vec<bool>,
        denom: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear(..) => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::AffineScalar(..) => OpKind::AffineScalar,
            Op::Clamp(..) => OpKind::Clamp,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Attention { .. } => OpKind::Attention,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

// ---- dense kernels -------------------------------------------------------

/// a[m,k] · b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m,k]ᵀ · g[m,n] -> [k,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// g[m,n] · b[k,n]ᵀ -> [m,k]
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn col_sum(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn expect_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("{what} expects a matrix, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of one op family. Test hook for
    /// verifying that the gradient checker catches wrong derivatives.
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on the tape (not written anywhere).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = t.clone().with_trainable(false);
        value.zero_grad();
        let v = self.push(value, Op::Leaf, t.trainable());
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_2d(self.value(a), "matmul")?;
        let (k2, n) = expect_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = expect_2d(self.value(x), "linear")?;
        let (k2, n) = expect_2d(self.value(w), "linear")?;
        if k != k2 {
            return Err(Error::shape(format!("linear [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = mm(self.value(x).data(), self.value(w).data(), m, k, n);
        let mut rg = self.rg(x) || self.rg(w);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != n {
                return Err(Error::shape(format!("bias of {} for width {n}", bias.numel())));
            }
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias.data()).for_each(|(o, v)| *o += v);
            }
            rg |= self.rg(b);
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Linear(x, w, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(vx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    /// `s · x` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar expects a single-element scale"));
        }
        let c = self.value(s).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| c * v).collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    /// `a · s + b` elementwise.
    pub fn affine(&mut self, s: Var, a: f64, b: f64) -> Var {
        self.unary(s, Op::AffineScalar(s, a), |v| a * v + b)
    }

    /// Clamp into `[lo, hi]`; the backward passes gradient on the closed
    /// interval and blocks it outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `x[m,n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).numel() != n {
            return Err(Error::shape(format!(
                "add_row: row width {n} vs {:?}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, v)| *o += v);
        }
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu_scalar)
    }

    /// ReLU whose backward treats exactly-zero inputs as active, so a
    /// zero-initialized projection feeding it still receives gradient.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(format!(
                "layer_norm width {d} vs gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let t = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; vx.numel()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = vx.data()[(o * len + j) * inner + i];
                }
                softmax_slice(&buf, &mut res);
                for (j, r) in res.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *r;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = expect_2d(self.value(x), "transpose")?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg))
    }

    /// Scaled dot-product attention core for a batch of independent
    /// sequences stacked along rows. `q`, `k`, `v` are `[n_seq · seq_len, d]`;
    /// each of `heads` heads attends over columns `h·d/heads .. (h+1)·d/heads`
    /// of its own sequence. Output has the same shape, heads concatenated.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = expect_2d(self.value(q), "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!("{rows} rows is not a multiple of sequence length {seq_len}")));
        }
        let n_seq = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(s * seq_len + i) * d + c0..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &kd[(s * seq_len + j) * d + c0..][..dh];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = &mut probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    softmax_slice(&scores, p);
                    let orow = &mut out[(s * seq_len + i) * d + c0..][..dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &vd[(s * seq_len + j) * d + c0..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, vv)| *o += pj * vv);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, n) = (vx.rows(), vx.cols());
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(format!("row {i} out of {rows}")));
            }
            out.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), n], out)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices (or vectors, as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let n = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != n {
                return Err(Error::shape(format!("concat width {} vs {n}", vp.cols())));
            }
            rows += vp.rows();
            out.extend_from_slice(vp.data());
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::new(&[rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Divides each row by its L2 norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Degenerate("row with zero or non-finite norm".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of `logits[R, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = expect_2d(self.value(logits), "cross_entropy")?;
        if labels.len() != r {
            return Err(Error::shape(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, row) in d.chunks(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[labels[i]];
            softmax_slice(row, &mut probs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Smooth-L1 (beta 1) summed over masked rows and columns, divided by
    /// the total row count.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let rows = self.value(pred).rows();
        if mask.len() != rows {
            return Err(Error::shape(format!("mask of {} for {rows} rows", mask.len())));
        }
        let n = self.value(pred).cols();
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for (r, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            for j in 0..n {
                let x = (p[r * n + j] - t[r * n + j]).abs();
                total += if x < 1.0 { 0.5 * x * x } else { x - 0.5 };
            }
        }
        let denom = rows as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::SmoothL1 {
                pred,
                target,
                mask: mask.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Smallest distance from any recorded input of a piecewise op (ReLU,
    /// clamp, smooth-L1) to its switch point. Finite differences are only
    /// meaningful when this exceeds the step times the input scale.
    pub fn kink_margin(&self) -> f64 {
        let val = |v: &Var| self.nodes[v.0].value.data();
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => m = val(x).iter().fold(m, |m, v| m.min(v.abs())),
                Op::Clamp(x, lo, hi) => {
                    m = val(x).iter().fold(m, |m, v| m.min((v - lo).abs()).min((v - hi).abs()))
                }
                Op::SmoothL1 { pred, target, mask, .. } => {
                    let n = self.nodes[pred.0].value.cols();
                    for (i, (p, t)) in val(pred).iter().zip(val(target)).enumerate() {
                        if mask[i / n] {
                            m = m.min(((p - t).abs() - 1.0).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    // ---- backward ----------------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc(&mut self, v: Var, g: Vec<f64>, factor: f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(acc) => acc
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += factor * b),
            None => {
                *slot = Some(if factor == 1.0 {
                    g
                } else {
                    g.into_iter().map(|b| factor * b).collect()
                })
            }
        }
    }

    /// Fills the tape's gradient buffers with ∂loss/∂node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// [`backward`](Self::backward), then adds parameter gradients into
    /// `store`. Only trainable tensors accumulate.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let node = &self.nodes[i];
        let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.rg(*a) {
                    out.push((*a, mm_nt(g, val(*b).data(), m, n, k)));
                }
                if self.rg(*b) {
                    out.push((*b, mm_tn(val(*a).data(), g, m, k, n)));
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = (val(*x).shape()[0], val(*x).shape()[1]);
                let n = val(*w).shape()[1];
                if self.rg(*x) {
                    out.push((*x, mm_nt(g, val(*w).data(), m, n, k)));
                }
                if self.rg(*w) {
                    out.push((*w, mm_tn(val(*x).data(), g, m, k, n)));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        out.push((*b, col_sum(g, n)));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| c * v).collect())),
            Op::MulScalar(x, s) => {
                let c = val(*s).item();
                let vx = val(*x).data();
                out.push((*x, g.iter().map(|v| c * v).collect()));
                out.push((*s, vec![g.iter().zip(vx).map(|(g, x)| g * x).sum()]));
            }
            Op::AffineScalar(s, a) => out.push((*s, g.iter().map(|v| a * v).collect())),
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::AddRow(x, b) => {
                let n = val(*x).cols();
                out.push((*x, g.to_vec()));
                out.push((*b, col_sum(g, n)));
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                out.push((*x, g.iter().zip(vx).map(|(g, x)| g * gelu_deriv(*x)).collect()));
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(g, x)| if *x >= 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*x).cols();
                let gam = val(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = is * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    let dg: Vec<f64> = g.iter().zip(xhat).map(|(g, h)| g * h).collect();
                    out.push((*gamma, col_sum(&dg, d)));
                }
                if self.rg(*beta) {
                    out.push((*beta, col_sum(g, d)));
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (rows, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let t = *seq_len;
                let n_seq = rows / t;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t];
                for s in 0..n_seq {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let row = |i: usize| (s * t + i) * d + c0;
                        for i in 0..t {
                            let p = &probs[((s * heads + h) * t + i) * t..][..t];
                            let go = &g[row(i)..][..dh];
                            for j in 0..t {
                                dp[j] = go
                                    .iter()
                                    .zip(&vd[row(j)..][..dh])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                for c in 0..dh {
                                    dv[row(j) + c] += p[j] * go[c];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[row(i) + c] += ds * kd[row(j) + c];
                                    dk[row(j) + c] += ds * qd[row(i) + c];
                                }
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::GatherRows(x, idx) => {
                let vx = val(*x);
                let n = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[r * n + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    out.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let r = labels.len() as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= g[0] / r);
                out.push((*logits, dx));
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                denom,
            } => {
                let n = val(*pred).cols();
                let (p, t) = (val(*pred).data(), val(*target).data());
                let mut dp = vec![0.0; p.len()];
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..n {
                        let x = p[r * n + j] - t[r * n + j];
                        let d = if x.abs() < 1.0 { x } else { x.signum() };
                        dp[r * n + j] = g[0] * d / denom;
                    }
                }
                out.push((*target, dp.iter().map(|v| -v).collect()));
                out.push((*pred, dp));
            }
        }
        for (v, gv) in out {
            self.acc(v, gv, factor);
        }
    }
}
