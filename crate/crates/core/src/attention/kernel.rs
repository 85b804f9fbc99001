//! Single-head causal attention kernels.
//!
//! Indices are 0-based here; query row `i` has `i + 1` keys and uses the
//! 1-based query index `i + 1` in the offset formulas. Both paths compute
//! scores, probabilities and the output accumulation with the same scalar
//! code in the same order, so a single tile covering the whole sequence
//! reproduces the naive path bit for bit.

use crate::normalizer::{normalize_row, normalize_row_vjp, NormalizerMode};
use crate::numeric::Scalar;

/// Additive score bias of one head.
#[derive(Debug, Clone, Copy)]
pub enum HeadBias<'a, T> {
    None,
    /// Learnable `b[0..=W]`; distances beyond `W` get 0.
    Table(&'a [T]),
    /// `−slope · dist`.
    Alibi(T),
}

impl<T: Scalar> HeadBias<'_, T> {
    #[inline]
    fn at(&self, dist: usize) -> T {
        match *self {
            HeadBias::None => T::zero(),
            HeadBias::Table(t) => t.get(dist).copied().unwrap_or_else(T::zero),
            HeadBias::Alibi(m) => -m * T::of(dist as f64),
        }
    }

    fn table_len(&self) -> usize {
        match self {
            HeadBias::Table(t) => t.len(),
            _ => 0,
        }
    }
}

/// Everything that parameterizes one head besides Q/K/V.
#[derive(Debug, Clone, Copy)]
pub struct HeadSpec<'a, T> {
    pub mode: NormalizerMode,
    pub bias: HeadBias<'a, T>,
    /// Learnable offset; ignored by modes without one.
    pub tau: T,
}

/// Contiguous `n × d_h` views of one head.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadView<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub n: usize,
    pub dh: usize,
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn rectified<T: Scalar>(mode: NormalizerMode, p: T, tau: T, i1: usize) -> T {
    match mode.offset(tau, i1) {
        None => p,
        Some(off) => {
            let a = p + off;
            if a > T::zero() {
                a
            } else {
                T::zero()
            }
        }
    }
}

#[inline]
fn is_active<T: Scalar>(mode: NormalizerMode, alpha: T) -> bool {
    mode == NormalizerMode::Softmax || alpha > T::zero()
}

impl<T: Scalar> HeadView<'_, T> {
    #[inline]
    fn row<'b>(&self, x: &'b [T], i: usize) -> &'b [T] {
        &x[i * self.dh..(i + 1) * self.dh]
    }

    /// `⟨q_i, k_j⟩/√d_h + b_{i−j}`.
    #[inline]
    pub fn score(&self, bias: &HeadBias<'_, T>, scale: T, i: usize, j: usize) -> T {
        dot(self.row(self.q, i), self.row(self.k, j)) * scale + bias.at(i - j)
    }
}

pub(crate) fn scale_for<T: Scalar>(dh: usize) -> T {
    T::one() / T::of(dh as f64).sqrt()
}

#[inline]
fn packed(i: usize) -> usize {
    i * (i + 1) / 2
}

pub(crate) struct NaiveSaved<T> {
    probs: Vec<T>,
    alpha: Vec<T>,
}

pub(crate) struct TwoPassSaved<T> {
    max: Vec<T>,
    sum: Vec<T>,
}

pub(crate) enum HeadSaved<T> {
    Naive(NaiveSaved<T>),
    TwoPass { saved: TwoPassSaved<T>, tile: usize },
}

pub(crate) struct HeadForward<T> {
    pub out: Vec<T>,
    pub saved: HeadSaved<T>,
    /// Packed lower-triangular weights when capture is on.
    pub weights: Option<Vec<f32>>,
    /// Peak number of scalars held in auxiliary buffers (outputs excluded).
    pub aux_peak: usize,
}

pub(crate) struct HeadGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Vec<T>,
    pub dtau: T,
    pub aux_peak: usize,
}

// ----------------------------------------------------------------- naive

pub(crate) fn forward_naive<T: Scalar>(h: &HeadView<'_, T>, spec: &HeadSpec<'_, T>, capture: bool) -> HeadForward<T> {
    let (n, dh) = (h.n, h.dh);
    let scale = scale_for::<T>(dh);
    let mut probs = vec![T::zero(); packed(n)];
    let mut alpha = vec![T::zero(); packed(n)];
    let mut srow = vec![T::zero(); n];
    let mut out = vec![T::zero(); n * dh];
    for i in 0..n {
        for (j, s) in srow[..=i].iter_mut().enumerate() {
            *s = h.score(&spec.bias, scale, i, j);
        }
        let r = packed(i)..packed(i + 1);
        normalize_row(spec.mode, &srow[..=i], i + 1, spec.tau, &mut probs[r.clone()], &mut alpha[r.clone()]);
        let orow = &mut out[i * dh..(i + 1) * dh];
        for (j, &a) in alpha[r].iter().enumerate() {
            if a != T::zero() {
                axpy(orow, a, h.row(h.v, j));
            }
        }
    }
    let weights = capture.then(|| alpha.iter().map(|a| a.f64() as f32).collect());
    HeadForward {
        out,
        aux_peak: probs.len() + alpha.len() + srow.len(),
        saved: HeadSaved::Naive(NaiveSaved { probs, alpha }),
        weights,
    }
}

pub(crate) fn backward_naive<T: Scalar>(
    h: &HeadView<'_, T>,
    spec: &HeadSpec<'_, T>,
    saved: &NaiveSaved<T>,
    dout: &[T],
) -> HeadGrads<T> {
    let (n, dh) = (h.n, h.dh);
    let scale = scale_for::<T>(dh);
    let mut dq = vec![T::zero(); n * dh];
    let mut dk = vec![T::zero(); n * dh];
    let mut dv = vec![T::zero(); n * dh];
    let mut dbias = vec![T::zero(); spec.bias.table_len()];
    let mut dtau = T::zero();
    let mut g = vec![T::zero(); n];
    let mut ds = vec![T::zero(); n];
    for i in 0..n {
        let r = packed(i)..packed(i + 1);
        let (probs, alpha) = (&saved.probs[r.clone()], &saved.alpha[r]);
        let do_i = &dout[i * dh..(i + 1) * dh];
        for (j, gj) in g[..=i].iter_mut().enumerate() {
            *gj = dot(do_i, h.row(h.v, j));
        }
        dtau += normalize_row_vjp(spec.mode, probs, alpha, i + 1, &g[..=i], &mut ds[..=i]);
        for j in 0..=i {
            let d = ds[j];
            if d != T::zero() {
                axpy(&mut dq[i * dh..(i + 1) * dh], d * scale, h.row(h.k, j));
                axpy(&mut dk[j * dh..(j + 1) * dh], d * scale, h.row(h.q, i));
                if let Some(b) = dbias.get_mut(i - j) {
                    *b += d;
                }
            }
            if alpha[j] != T::zero() {
                axpy(&mut dv[j * dh..(j + 1) * dh], alpha[j], do_i);
            }
        }
    }
    HeadGrads { dq, dk, dv, aux_peak: saved.probs.len() + saved.alpha.len() + 2 * n + dbias.len(), dbias, dtau }
}

// -------------------------------------------------------------- two-pass

/// Streams key tiles of width `tile` for every query tile, calling
/// `f(i, j0, j1)` with the causal key range `j0..j1` of query `i`.
fn for_tiles(n: usize, tile: usize, mut f: impl FnMut(usize, usize, usize)) {
    for i0 in (0..n).step_by(tile) {
        let i1 = (i0 + tile).min(n);
        for j0 in (0..i1).step_by(tile) {
            let j1 = (j0 + tile).min(n);
            for i in i0..i1 {
                let jmax = j1.min(i + 1);
                if jmax > j0 {
                    f(i, j0, jmax);
                }
            }
        }
    }
}

pub(crate) fn forward_two_pass<T: Scalar>(
    h: &HeadView<'_, T>,
    spec: &HeadSpec<'_, T>,
    tile: usize,
    capture: bool,
) -> HeadForward<T> {
    let (n, dh) = (h.n, h.dh);
    let tile = tile.clamp(1, n.max(1));
    let scale = scale_for::<T>(dh);

    // pass 1: running max and exp-sum per query
    let mut max = vec![T::neg_infinity(); n];
    let mut sum = vec![T::zero(); n];
    let mut sbuf = vec![T::zero(); tile];
    for_tiles(n, tile, |i, j0, j1| {
        let s = &mut sbuf[..j1 - j0];
        let mut tmax = T::neg_infinity();
        for (j, sj) in (j0..j1).zip(s.iter_mut()) {
            *sj = h.score(&spec.bias, scale, i, j);
            if *sj > tmax {
                tmax = *sj;
            }
        }
        let m_new = if tmax > max[i] { tmax } else { max[i] };
        let mut add = T::zero();
        for &sj in s.iter() {
            add += (sj - m_new).exp();
        }
        sum[i] = sum[i] * (max[i] - m_new).exp() + add;
        max[i] = m_new;
    });

    // pass 2: offset, rectify and accumulate Σ α v
    let mut out = vec![T::zero(); n * dh];
    let mut weights = capture.then(|| vec![0f32; packed(n)]);
    for_tiles(n, tile, |i, j0, j1| {
        let orow = &mut out[i * dh..(i + 1) * dh];
        for j in j0..j1 {
            let s = h.score(&spec.bias, scale, i, j);
            let p = (s - max[i]).exp() / sum[i];
            let a = rectified(spec.mode, p, spec.tau, i + 1);
            if let Some(w) = weights.as_mut() {
                w[packed(i) + j] = a.f64() as f32;
            }
            if a != T::zero() {
                axpy(orow, a, h.row(h.v, j));
            }
        }
    });
    HeadForward {
        out,
        aux_peak: max.len() + sum.len() + sbuf.len(),
        saved: HeadSaved::TwoPass { saved: TwoPassSaved { max, sum }, tile },
        weights,
    }
}

pub(crate) fn backward_two_pass<T: Scalar>(
    h: &HeadView<'_, T>,
    spec: &HeadSpec<'_, T>,
    saved: &TwoPassSaved<T>,
    tile: usize,
    dout: &[T],
) -> HeadGrads<T> {
    let (n, dh) = (h.n, h.dh);
    let tile = tile.clamp(1, n.max(1));
    let scale = scale_for::<T>(dh);
    let (max, sum) = (&saved.max, &saved.sum);
    let prob = |i: usize, j: usize| (h.score(&spec.bias, scale, i, j) - max[i]).exp() / sum[i];

    // pass 1: D_i = Σ_active p·g, plus the τ gradient
    let mut dsum = vec![T::zero(); n];
    let mut tau_rows = vec![T::zero(); n];
    for_tiles(n, tile, |i, j0, j1| {
        let do_i = &dout[i * dh..(i + 1) * dh];
        for j in j0..j1 {
            let p = prob(i, j);
            let a = rectified(spec.mode, p, spec.tau, i + 1);
            if is_active(spec.mode, a) {
                let g = dot(do_i, h.row(h.v, j));
                dsum[i] += p * g;
                tau_rows[i] += g;
            }
        }
    });
    let mut dtau = T::zero();
    for (i, &t) in tau_rows.iter().enumerate() {
        dtau += t * spec.mode.tau_coeff::<T>(i + 1);
    }

    // pass 2: score gradients and parameter accumulation
    let mut dq = vec![T::zero(); n * dh];
    let mut dk = vec![T::zero(); n * dh];
    let mut dv = vec![T::zero(); n * dh];
    let mut dbias = vec![T::zero(); spec.bias.table_len()];
    for_tiles(n, tile, |i, j0, j1| {
        let do_i = &dout[i * dh..(i + 1) * dh];
        for j in j0..j1 {
            let p = prob(i, j);
            let a = rectified(spec.mode, p, spec.tau, i + 1);
            let gp = if is_active(spec.mode, a) { dot(do_i, h.row(h.v, j)) } else { T::zero() };
            let d = p * (gp - dsum[i]);
            if d != T::zero() {
                axpy(&mut dq[i * dh..(i + 1) * dh], d * scale, h.row(h.k, j));
                axpy(&mut dk[j * dh..(j + 1) * dh], d * scale, h.row(h.q, i));
                if let Some(b) = dbias.get_mut(i - j) {
                    *b += d;
                }
            }
            if a != T::zero() {
                axpy(&mut dv[j * dh..(j + 1) * dh], a, do_i);
            }
        }
    });
    HeadGrads { dq, dk, dv, aux_peak: dsum.len() + tau_rows.len() + dbias.len(), dbias, dtau }
}

pub(crate) fn backward<T: Scalar>(
    h: &HeadView<'_, T>,
    spec: &HeadSpec<'_, T>,
    saved: &HeadSaved<T>,
    dout: &[T],
) -> HeadGrads<T> {
    match saved {
        HeadSaved::Naive(s) => backward_naive(h, spec, s, dout),
        HeadSaved::TwoPass { saved, tile } => backward_two_pass(h, spec, saved, *tile, dout),
    }
}
