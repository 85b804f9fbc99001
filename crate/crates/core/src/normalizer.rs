//! Attention normalizers: softmax, sparsemax and the Elastic-Softmax family
//! `ReLU(softmax(s) + offset)`, plus the density / sink metrics.
//!
//! Queries are 1-based in the offset formulas: the `i`-th query attends to
//! `i` keys, and the per-query offset is `τ/i`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capture::WeightCapture;
use crate::error::{bail, Error, Result};
use crate::numeric::{softmax_row_into, Backward, BackwardCtx, Scalar, Tape, Tensor, Var};

/// Which normalizer turns a causal score row into attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormalizerMode {
    Softmax,
    Sparsemax,
    /// `ReLU(softmax + τ)`, offset independent of the query index.
    ElasticGlobal {
        tau_init: f64,
    },
    /// `ReLU(softmax + τ/i)`.
    ElasticPerQuery {
        tau_init: f64,
    },
    /// `ReLU(softmax − 1/i)`, nothing learned.
    FixedPerQuery,
}

impl NormalizerMode {
    /// The Lazy Attention default, `ReLU(softmax + τ/i)` with `τ = −1` at init.
    pub const fn elastic() -> Self {
        NormalizerMode::ElasticPerQuery { tau_init: -1.0 }
    }

    /// Learnable per-head offset present?
    pub fn has_tau(&self) -> bool {
        matches!(self, NormalizerMode::ElasticGlobal { .. } | NormalizerMode::ElasticPerQuery { .. })
    }

    pub fn tau_init(&self) -> f64 {
        match self {
            NormalizerMode::ElasticGlobal { tau_init } | NormalizerMode::ElasticPerQuery { tau_init } => *tau_init,
            NormalizerMode::FixedPerQuery => -1.0,
            _ => 0.0,
        }
    }

    /// Expressible as an offset on softmax weights, hence streamable in two
    /// passes. Sparsemax needs the whole sorted row.
    pub fn is_streamable(&self) -> bool {
        !matches!(self, NormalizerMode::Sparsemax)
    }

    /// Offset added to the softmax weights of query `i` (1-based); `None` for
    /// plain softmax, which skips the rectifier.
    #[inline]
    pub fn offset<T: Scalar>(&self, tau: T, i: usize) -> Option<T> {
        match self {
            NormalizerMode::Softmax | NormalizerMode::Sparsemax => None,
            NormalizerMode::ElasticGlobal { .. } => Some(tau),
            NormalizerMode::ElasticPerQuery { .. } => Some(tau / T::of(i as f64)),
            NormalizerMode::FixedPerQuery => Some(-T::one() / T::of(i as f64)),
        }
    }

    /// `∂offset/∂τ` for query `i`.
    #[inline]
    pub fn tau_coeff<T: Scalar>(&self, i: usize) -> T {
        match self {
            NormalizerMode::ElasticGlobal { .. } => T::one(),
            NormalizerMode::ElasticPerQuery { .. } => T::one() / T::of(i as f64),
            _ => T::zero(),
        }
    }
}

impl fmt::Display for NormalizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormalizerMode::Softmax => write!(f, "softmax"),
            NormalizerMode::Sparsemax => write!(f, "sparsemax"),
            NormalizerMode::ElasticGlobal { tau_init } => write!(f, "elastic-global:{tau_init}"),
            NormalizerMode::ElasticPerQuery { tau_init } => write!(f, "elastic:{tau_init}"),
            NormalizerMode::FixedPerQuery => write!(f, "fixed"),
        }
    }
}

impl FromStr for NormalizerMode {
    type Err = Error;

    /// `softmax`, `sparsemax`, `fixed`, `elastic[:τ0]`, `elastic-global[:τ0]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let tau = |default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse::<f64>().map_err(|_| Error::Config(format!("bad τ init {a:?}"))),
            }
        };
        Ok(match name {
            "softmax" => NormalizerMode::Softmax,
            "sparsemax" => NormalizerMode::Sparsemax,
            "fixed" => NormalizerMode::FixedPerQuery,
            "elastic" | "elastic-per-query" => NormalizerMode::ElasticPerQuery { tau_init: tau(-1.0)? },
            "elastic-global" => NormalizerMode::ElasticGlobal { tau_init: tau(0.0)? },
            other => bail!(Config, "unknown normalizer {:?}", other),
        })
    }
}

// --------------------------------------------------------------- row ops

fn rectify<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Plain softmax of a row.
pub fn softmax_row<T: Scalar>(scores: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    softmax_row_into(scores, |_| true, &mut out);
    out
}

/// `ReLU(softmax(scores) + τ/i)` for the `i`-th query (1-based), which
/// attends to `scores.len() == i` keys.
pub fn elastic_row<T: Scalar>(scores: &[T], i: usize, tau: T) -> Vec<T> {
    let off = tau / T::of(i as f64);
    softmax_row(scores).into_iter().map(|p| rectify(p + off)).collect()
}

/// `ReLU(softmax(scores) − 1/i)`.
pub fn fixed_offset_row<T: Scalar>(scores: &[T], i: usize) -> Vec<T> {
    elastic_row(scores, i, -T::one())
}

/// `ReLU(softmax(scores) + τ)`.
pub fn global_offset_row<T: Scalar>(scores: &[T], tau: T) -> Vec<T> {
    softmax_row(scores).into_iter().map(|p| rectify(p + tau)).collect()
}

/// Euclidean projection of `scores` onto the probability simplex
/// (sort-and-threshold).
pub fn sparsemax_row<T: Scalar>(scores: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    sparsemax_into(scores, &mut out);
    out
}

/// Threshold `τ*` with `Σ max(z − τ*, 0) = 1`.
pub fn sparsemax_threshold<T: Scalar>(scores: &[T]) -> T {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut support_sum = sorted[0];
    let mut support = 1usize;
    for (k, &z) in sorted.iter().enumerate() {
        cumsum += z;
        let kk = T::of((k + 1) as f64);
        if T::one() + kk * z > cumsum {
            support = k + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - T::one()) / T::of(support as f64)
}

fn sparsemax_into<T: Scalar>(scores: &[T], out: &mut [T]) {
    let thr = sparsemax_threshold(scores);
    for (o, &z) in out.iter_mut().zip(scores) {
        *o = rectify(z - thr);
    }
}

/// Forward of one causal row for query `i` (1-based). `probs` receives the
/// pre-offset distribution (softmax, or sparsemax itself) and `alpha` the
/// final weights.
pub(crate) fn normalize_row<T: Scalar>(
    mode: NormalizerMode,
    scores: &[T],
    i: usize,
    tau: T,
    probs: &mut [T],
    alpha: &mut [T],
) {
    if mode == NormalizerMode::Sparsemax {
        sparsemax_into(scores, probs);
        alpha.copy_from_slice(probs);
        return;
    }
    softmax_row_into(scores, |_| true, probs);
    match mode.offset(tau, i) {
        None => alpha.copy_from_slice(probs),
        Some(off) => {
            for (a, &p) in alpha.iter_mut().zip(probs.iter()) {
                *a = rectify(p + off);
            }
        }
    }
}

/// Vector-Jacobian product of [`normalize_row`]: writes `∂L/∂scores` into
/// `ds` and returns `∂L/∂τ`. ReLU uses subgradient 0 at the kink.
pub(crate) fn normalize_row_vjp<T: Scalar>(
    mode: NormalizerMode,
    probs: &[T],
    alpha: &[T],
    i: usize,
    g: &[T],
    ds: &mut [T],
) -> T {
    match mode {
        NormalizerMode::Sparsemax => {
            let mut sum = T::zero();
            let mut count = 0usize;
            for (&a, &gj) in alpha.iter().zip(g) {
                if a > T::zero() {
                    sum += gj;
                    count += 1;
                }
            }
            let mean = sum / T::of(count.max(1) as f64);
            for ((d, &a), &gj) in ds.iter_mut().zip(alpha).zip(g) {
                *d = if a > T::zero() { gj - mean } else { T::zero() };
            }
            T::zero()
        }
        NormalizerMode::Softmax => {
            crate::numeric::softmax_row_vjp(probs, g, ds);
            T::zero()
        }
        _ => {
            let mut dot = T::zero();
            let mut active_sum = T::zero();
            for ((&p, &a), &gj) in probs.iter().zip(alpha).zip(g) {
                if a > T::zero() {
                    dot += p * gj;
                    active_sum += gj;
                }
            }
            for (((d, &p), &a), &gj) in ds.iter_mut().zip(probs).zip(alpha).zip(g) {
                let gp = if a > T::zero() { gj } else { T::zero() };
                *d = p * (gp - dot);
            }
            active_sum * mode.tau_coeff::<T>(i)
        }
    }
}

// -------------------------------------------------------------- tape op

struct NormalizeOp<T> {
    mode: NormalizerMode,
    n: usize,
    probs: Vec<T>,
    has_tau: bool,
}

impl<T: Scalar> Backward<T> for NormalizeOp<T> {
    fn name(&self) -> &'static str {
        "normalize_causal"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let n = self.n;
        let alpha = ctx.output.data();
        let mut ds = vec![T::zero(); n * n];
        let mut dtau = T::zero();
        for r in 0..n {
            let len = r + 1;
            let row = r * n..r * n + len;
            dtau += normalize_row_vjp(
                self.mode,
                &self.probs[row.clone()],
                &alpha[row.clone()],
                len,
                &ctx.grad[row.clone()],
                &mut ds[row],
            );
        }
        let mut out = vec![Some(ds)];
        if self.has_tau {
            out.push(Some(vec![dtau]));
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Causal row-wise normalization of `scores[n×n]`; entries above the
    /// diagonal are ignored and come out as 0. `tau` is a 1-element tensor,
    /// required for the learnable-offset modes.
    pub fn normalize_causal(&mut self, scores: Var, tau: Option<Var>, mode: NormalizerMode) -> Result<Var> {
        let (n, n2) = self.value(scores).dims2()?;
        if n != n2 {
            bail!(Dimension, "causal scores must be square, got {}×{}", n, n2);
        }
        let tau_value = match (mode.has_tau(), tau) {
            (true, Some(t)) => self.value(t).item()?,
            (true, None) => bail!(Contract, "{} needs a τ input", mode),
            (false, _) => T::zero(),
        };
        let s = self.value(scores).data();
        let mut probs = vec![T::zero(); n * n];
        let mut alpha = vec![T::zero(); n * n];
        for r in 0..n {
            let row = r * n..r * n + r + 1;
            normalize_row(mode, &s[row.clone()], r + 1, tau_value, &mut probs[row.clone()], &mut alpha[row]);
        }
        let out = Tensor::new(&[n, n], alpha)?;
        let op = NormalizeOp { mode, n, probs, has_tau: mode.has_tau() };
        let inputs: Vec<Var> = match (mode.has_tau(), tau) {
            (true, Some(t)) => vec![scores, t],
            _ => vec![scores],
        };
        Ok(self.push(out, &inputs, Box::new(op)))
    }
}

// ---------------------------------------------------------- offsets table

/// Learnable `τ[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticOffsets<T: Scalar> {
    layers: Vec<Tensor<T>>,
}

impl<T: Scalar> ElasticOffsets<T> {
    pub fn new(layers: usize, heads: usize, init: f64) -> Self {
        Self { layers: (0..layers).map(|_| Tensor::full(&[heads], T::of(init)).with_requires_grad(true)).collect() }
    }

    pub fn get(&self, layer: usize, head: usize) -> T {
        self.layers[layer].data()[head]
    }

    pub fn layer(&self, layer: usize) -> &Tensor<T> {
        &self.layers[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.layers[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut()
    }

    pub fn layer_mean(&self, layer: usize) -> f64 {
        let d = self.layers[layer].data();
        d.iter().map(|x| x.f64()).sum::<f64>() / d.len() as f64
    }

    /// CSV with columns `layer,head,tau`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "tau"])?;
        for (l, t) in self.layers.iter().enumerate() {
            for (h, tau) in t.data().iter().enumerate() {
                w.write_record(&[l.to_string(), h.to_string(), format!("{}", tau.f64())])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// ------------------------------------------------------- density / sink

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDensity {
    pub layer: usize,
    pub head: usize,
    pub density_pct: f64,
    pub sink_pct: f64,
}

/// Mean attention mass on non-first keys (density) and on the first key
/// (sink), in percent, averaged uniformly over (layer, head, sequence,
/// query), first query included.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySink {
    pub density_pct: f64,
    pub sink_pct: f64,
    pub per_head: Vec<HeadDensity>,
}

pub fn density_and_sink(capture: &WeightCapture) -> Result<DensitySink> {
    if capture.is_empty() {
        bail!(Contract, "density/sink needs a non-empty weight capture");
    }
    let mut keys: Vec<(usize, usize)> = capture.heads.iter().map(|h| (h.layer, h.head)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut per: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); keys.len()];
    let (mut dens, mut sink, mut rows) = (0.0f64, 0.0f64, 0usize);
    for hw in &capture.heads {
        let slot = keys.binary_search(&(hw.layer, hw.head)).expect("key present");
        for i in 0..hw.n {
            let row = hw.row(i);
            let s = row[0] as f64;
            let d: f64 = row[1..].iter().map(|&a| a as f64).sum();
            per[slot].0 += d;
            per[slot].1 += s;
            per[slot].2 += 1;
            dens += d;
            sink += s;
            rows += 1;
        }
    }
    if rows == 0 {
        bail!(Contract, "weight capture has no query rows");
    }
    let per_head = keys
        .iter()
        .zip(&per)
        .map(|(&(layer, head), &(d, s, c))| HeadDensity {
            layer,
            head,
            density_pct: 100.0 * d / c as f64,
            sink_pct: 100.0 * s / c as f64,
        })
        .collect();
    Ok(DensitySink { density_pct: 100.0 * dens / rows as f64, sink_pct: 100.0 * sink / rows as f64, per_head })
}
