//! Rotary position embedding, learnable per-head distance biases and the
//! fixed ALiBi slopes used as a comparison mode.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numeric::{Backward, BackwardCtx, Scalar, Tape, Tensor, Var};

/// Default RoPE base.
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
/// Default learnable-bias window.
pub const DEFAULT_BIAS_WINDOW: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            bail!(Config, "RoPE head dimension must be even and positive, got {}", head_dim);
        }
        if base.is_nan() || base <= 1.0 {
            bail!(Config, "RoPE base must exceed 1, got {}", base);
        }
        Ok(Self { base, head_dim })
    }

    /// `θ_k = B^(−2k/d_h)` for `0 ≤ k < d_h/2`.
    pub fn freq(&self, k: usize) -> Result<f64> {
        if k >= self.head_dim / 2 {
            bail!(Index, "frequency index {} out of range for head dim {}", k, self.head_dim);
        }
        Ok(self.base.powf(-2.0 * k as f64 / self.head_dim as f64))
    }

    /// (cos, sin) of `pos·θ_k` for every pair, laid out `[positions.len() × d_h/2]`.
    fn tables<T: Scalar>(&self, positions: &[usize]) -> (Vec<T>, Vec<T>) {
        let half = self.head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|k| self.base.powf(-2.0 * k as f64 / self.head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &f in &freqs {
                let angle = p as f64 * f;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        (cos, sin)
    }
}

/// Rotates each consecutive pair `(x_2k, x_2k+1)` of every head block in
/// place. `inverse` applies the transpose rotation.
fn rotate<T: Scalar>(data: &mut [T], cols: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for head in row.chunks_mut(head_dim) {
            for k in 0..half {
                let (x, y) = (head[2 * k], head[2 * k + 1]);
                let sn = if inverse { -s[k] } else { s[k] };
                head[2 * k] = x * c[k] - y * sn;
                head[2 * k + 1] = x * sn + y * c[k];
            }
        }
    }
}

fn check_rope_input<T: Scalar>(x: &Tensor<T>, cfg: &RopeConfig, positions: &[usize]) -> Result<(usize, usize)> {
    let (rows, cols) = x.dims2()?;
    if cols % cfg.head_dim != 0 {
        bail!(Dimension, "row width {} is not a multiple of head dim {}", cols, cfg.head_dim);
    }
    if positions.len() != rows {
        bail!(Dimension, "{} positions for {} rows", positions.len(), rows);
    }
    Ok((rows, cols))
}

/// Applies RoPE to `x[n × (heads·d_h)]`; row `r` sits at `positions[r]`.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, cfg: &RopeConfig, positions: &[usize]) -> Result<Tensor<T>> {
    let (_, cols) = check_rope_input(x, cfg, positions)?;
    let (cos, sin) = cfg.tables::<T>(positions);
    let mut out = x.clone().with_requires_grad(false);
    rotate(out.data_mut(), cols, cfg.head_dim, &cos, &sin, false);
    Ok(out)
}

struct RopeOp<T> {
    cols: usize,
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Backward<T> for RopeOp<T> {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let mut g = ctx.grad.to_vec();
        rotate(&mut g, self.cols, self.head_dim, &self.cos, &self.sin, true);
        Ok(vec![Some(g)])
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`apply_rope`].
    pub fn rope(&mut self, x: Var, cfg: &RopeConfig, positions: &[usize]) -> Result<Var> {
        let (_, cols) = check_rope_input(self.value(x), cfg, positions)?;
        let (cos, sin) = cfg.tables::<T>(positions);
        let mut out = self.value(x).clone().with_requires_grad(false);
        rotate(out.data_mut(), cols, cfg.head_dim, &cos, &sin, false);
        let op = RopeOp { cols, head_dim: cfg.head_dim, cos, sin };
        Ok(self.push(out, &[x], Box::new(op)))
    }
}

/// Learnable distance biases `b[layer][head][0..=W]`; zero beyond `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable<T: Scalar> {
    window: usize,
    heads: usize,
    layers: Vec<Tensor<T>>,
}

impl<T: Scalar> BiasTable<T> {
    /// All-zero table, so scores start out as pure RoPE.
    pub fn zeros(layers: usize, heads: usize, window: usize) -> Self {
        Self {
            window,
            heads,
            layers: (0..layers).map(|_| Tensor::zeros(&[heads, window + 1]).with_requires_grad(true)).collect(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `b[layer][head][dist]`, or exactly 0 when `dist > W`.
    pub fn lookup(&self, layer: usize, head: usize, dist: usize) -> T {
        if dist > self.window {
            return T::zero();
        }
        self.layers[layer].data()[head * (self.window + 1) + dist]
    }

    /// Per-layer `[heads × (W+1)]` tensor.
    pub fn layer(&self, layer: usize) -> &Tensor<T> {
        &self.layers[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.layers[layer]
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut()
    }

    /// CSV with columns `layer,head,distance,bias`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "distance", "bias"])?;
        for (l, t) in self.layers.iter().enumerate() {
            for h in 0..self.heads {
                for d in 0..=self.window {
                    let b = t.data()[h * (self.window + 1) + d];
                    w.write_record(&[l.to_string(), h.to_string(), d.to_string(), format!("{}", b.f64())])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// ALiBi slope `m_h = 2^(−8h/H)` for 0-based head `h`.
pub fn alibi_slope(head: usize, heads: usize) -> f64 {
    (2.0f64).powf(-8.0 * head as f64 / heads as f64)
}

/// Static ALiBi bias `−m_h · dist`.
pub fn alibi_bias(head: usize, heads: usize, dist: usize) -> f64 {
    -alibi_slope(head, heads) * dist as f64
}
