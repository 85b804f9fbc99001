//! Core differentiable ops: matmul, elementwise, softmax, layer norm,
//! cross-entropy and embedding lookup.

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Variance guard used by [`Tape::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Masking for [`Tape::softmax_lastdim`].
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Entry (i, j) of every trailing n_q×n block is kept iff j ≤ i.
    Causal,
    /// Per-element keep flags, same length as the input.
    Keep(Vec<bool>),
}

impl Mask {
    fn keep(&self, shape: &[usize], flat: usize) -> bool {
        match self {
            Mask::Keep(flags) => flags[flat],
            Mask::Causal => {
                let n = shape.last().copied().unwrap_or(1);
                let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
                let j = flat % n;
                let i = (flat / n) % rows;
                j <= i
            }
        }
    }
}

fn grads<T: Scalar>(items: impl IntoIterator<Item = Option<Vec<T>>>) -> Result<Vec<Option<Vec<T>>>> {
    Ok(items.into_iter().collect())
}

// ---------------------------------------------------------------- matmul

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let da = ctx.needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            T::gemm(m, n, k, ctx.grad, false, b, true, &mut da, false);
            da
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            T::gemm(k, m, n, a, true, ctx.grad, false, &mut db, false);
            db
        });
        grads([da, db])
    }
}

// ------------------------------------------------------------ elementwise

enum Binary {
    Add,
    Mul,
}

/// Broadcast layout of a binary op: same shape, or one side is a scalar.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

struct BinaryOp {
    kind: Binary,
    bcast: Bcast,
}

impl<T: Scalar> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let g = ctx.grad;
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let at = |x: &[T], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        // gradient w.r.t. one operand, given the other
        let side = |other: &[T], scalar_side: bool| -> Vec<T> {
            let full: Vec<T> = match self.kind {
                Binary::Add => g.to_vec(),
                Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * at(other, i)).collect(),
            };
            if scalar_side {
                vec![full.iter().copied().sum()]
            } else {
                full
            }
        };
        let (ls, rs) = match self.bcast {
            Bcast::Same => (false, false),
            Bcast::LhsScalar => (true, false),
            Bcast::RhsScalar => (false, true),
        };
        grads([ctx.needs[0].then(|| side(b, ls)), ctx.needs[1].then(|| side(a, rs))])
    }
}

#[derive(Clone, Copy)]
enum Unary<T> {
    Scale(T),
    Relu,
    Exp,
    Gelu,
}

struct UnaryOp<T> {
    kind: Unary<T>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Backward<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            Unary::Scale(_) => "scale",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Gelu => "gelu",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad;
        let dx: Vec<T> = match self.kind {
            Unary::Scale(s) => g.iter().map(|&gi| gi * s).collect(),
            // subgradient 0 at x == 0
            Unary::Relu => g.iter().zip(x).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect(),
            Unary::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
            Unary::Gelu => g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect(),
        };
        grads([Some(dx)])
    }
}

// ------------------------------------------------------------- reductions

struct SumOp {
    mean: bool,
}

impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let n = ctx.inputs[0].numel();
        let g = if self.mean { ctx.grad[0] / T::of(n as f64) } else { ctx.grad[0] };
        grads([Some(vec![g; n])])
    }
}

// ---------------------------------------------------------------- softmax

struct SoftmaxOp;

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let n = ctx.output.last_dim();
        let y = ctx.output.data();
        let mut dx = vec![T::zero(); y.len()];
        for ((yr, gr), dr) in y.chunks(n).zip(ctx.grad.chunks(n)).zip(dx.chunks_mut(n)) {
            softmax_row_vjp(yr, gr, dr);
        }
        grads([Some(dx)])
    }
}

/// `dx = y ⊙ (g − ⟨y, g⟩)`, the softmax vector-Jacobian product.
pub fn softmax_row_vjp<T: Scalar>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = yi * (gi - dot);
    }
}

/// Max-shifted softmax of one row, writing into `out`. Entries with
/// `keep[j] == false` get weight 0. Returns `(max, sum)` of the kept
/// entries, or `None` if every entry is masked.
pub fn softmax_row_into<T: Scalar>(x: &[T], keep: impl Fn(usize) -> bool, out: &mut [T]) -> Option<(T, T)> {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return None;
    }
    let mut sum = T::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { T::zero() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some((max, sum))
}

// -------------------------------------------------------------- layernorm

struct LayerNormOp<T> {
    rows: usize,
    d: usize,
    mean: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let (rows, d) = (self.rows, self.d);
        let x = ctx.inputs[0].data();
        let gain = ctx.inputs[1].data();
        let g = ctx.grad;
        let mut dx = vec![T::zero(); rows * d];
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); d];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let gr = &g[r * d..(r + 1) * d];
            let (mu, rstd) = (self.mean[r], self.rstd[r]);
            for (h, &xi) in xhat.iter_mut().zip(xr) {
                *h = (xi - mu) * rstd;
            }
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for c in 0..d {
                dgain[c] += gr[c] * xhat[c];
                dbias[c] += gr[c];
                let dh = gr[c] * gain[c];
                mean_dxhat += dh;
                mean_dxhat_xhat += dh * xhat[c];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for c in 0..d {
                let dh = gr[c] * gain[c];
                dxr[c] = rstd * (dh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
        }
        grads([ctx.needs[0].then_some(dx), ctx.needs[1].then_some(dgain), ctx.needs[2].then_some(dbias)])
    }
}

// ---------------------------------------------------------- cross-entropy

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
    vocab: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let n = self.targets.len();
        let scale = ctx.grad[0] / T::of(n as f64);
        let mut dx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (r, &t) in self.targets.iter().enumerate() {
            dx[r * self.vocab + t] -= scale;
        }
        grads([Some(dx)])
    }
}

// -------------------------------------------------------------- embedding

struct EmbeddingOp {
    ids: Vec<usize>,
    d: usize,
    vocab: usize,
}

impl<T: Scalar> Backward<T> for EmbeddingOp {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let d = self.d;
        let mut dt = vec![T::zero(); self.vocab * d];
        for (r, &id) in self.ids.iter().enumerate() {
            let dst = &mut dt[id * d..(id + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&ctx.grad[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
        grads([Some(dt)])
    }
}

// ------------------------------------------------------------ tape methods

impl<T: Scalar> Tape<T> {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            bail!(Dimension, "matmul inner dims disagree: {}×{} · {}×{}", m, k, k2, n);
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut c, false);
        let out = Tensor::new(&[m, n], c)?;
        Ok(self.push(out, &[a, b], Box::new(MatMul { m, k, n })))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if ta.numel() == 1 {
            Bcast::LhsScalar
        } else if tb.numel() == 1 {
            Bcast::RhsScalar
        } else {
            bail!(Dimension, "cannot broadcast {:?} with {:?}", ta.shape(), tb.shape());
        };
        let shape = match bcast {
            Bcast::LhsScalar => tb.shape().to_vec(),
            _ => ta.shape().to_vec(),
        };
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |x: &[T], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        let data: Vec<T> = (0..numel)
            .map(|i| match kind {
                Binary::Add => at(da, i) + at(db, i),
                Binary::Mul => at(da, i) * at(db, i),
            })
            .collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, &[a, b], Box::new(BinaryOp { kind, bcast })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn unary(&mut self, a: Var, kind: Unary<T>) -> Var {
        let x = self.value(a);
        let f = |v: T| match kind {
            Unary::Scale(s) => v * s,
            Unary::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Unary::Exp => v.exp(),
            Unary::Gelu => gelu(v),
        };
        let out = Tensor::from_fn(x.shape(), |i| f(x.data()[i]));
        self.push(out, &[a], Box::new(UnaryOp { kind }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Unary::Scale(s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], Box::new(SumOp { mean: false }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.push(Tensor::scalar(s), &[a], Box::new(SumOp { mean: true }))
    }

    /// Softmax over the last axis, with optional masking.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n == 0 {
            bail!(Dimension, "softmax over an empty axis");
        }
        if let Some(Mask::Keep(flags)) = mask {
            if flags.len() != t.numel() {
                bail!(Dimension, "mask has {} flags for {} elements", flags.len(), t.numel());
            }
        }
        let shape = t.shape().to_vec();
        let mut out = vec![T::zero(); t.numel()];
        for (r, (xr, or)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m.keep(&shape, r * n + j));
            if softmax_row_into(xr, keep, or).is_none() {
                bail!(Domain, "softmax row {} is fully masked", r);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x], Box::new(SoftmaxOp)))
    }

    /// Row-wise layer norm of `x[rows×d]` with affine `gain[d]`, `bias[d]`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d < 2 {
            bail!(Dimension, "layernorm needs a feature axis of at least 2, got {}", d);
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            bail!(Dimension, "layernorm affine parameters must have {} elements", d);
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); rows * d];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::one() / T::of(d as f64);
        for (xr, or) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            let mu = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LAYERNORM_EPS)).sqrt();
            for c in 0..d {
                or[c] = (xr[c] - mu) * rs * g[c] + b[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, &[x, gain, bias], Box::new(LayerNormOp { rows, d, mean, rstd })))
    }

    /// Mean negative log-likelihood of `targets` under `logits[n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n {
            bail!(Dimension, "{} targets for {} logit rows", targets.len(), n);
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            bail!(Index, "target {} outside vocabulary of {}", t, vocab);
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * vocab];
        let mut loss = T::zero();
        for (r, (xr, pr)) in x.chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            let (max, sum) = softmax_row_into(xr, |_| true, pr).expect("unmasked row");
            // -log p_t = log Σ exp(x - max) + max - x_t
            loss += sum.ln() + max - xr[targets[r]];
        }
        loss /= T::of(n as f64);
        let op = CrossEntropyOp { probs, targets: targets.to_vec(), vocab };
        Ok(self.push(Tensor::scalar(loss), &[logits], Box::new(op)))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            bail!(Index, "token id {} outside vocabulary of {}", id, vocab);
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let op = EmbeddingOp { ids: ids.to_vec(), d, vocab };
        Ok(self.push(out, &[table], Box::new(op)))
    }
}
