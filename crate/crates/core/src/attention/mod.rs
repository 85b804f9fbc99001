//! Causal multi-head Lazy Attention.
//!
//! Scores are `⟨R_i q_i, R_j k_j⟩/√d_h + b_{|i−j|}` and rows are normalized
//! by the configured [`NormalizerMode`]. Two interchangeable evaluation paths
//! exist: a naive one that materializes every row, and a two-pass tiled one
//! that keeps only per-query max / exp-sum statistics between passes.

mod kernel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use kernel::{HeadBias, HeadSpec};
use kernel::{HeadForward, HeadSaved, HeadView};

use crate::capture::{HeadWeights, WeightCapture};
use crate::error::{bail, Error, Result};
use crate::normalizer::NormalizerMode;
use crate::numeric::{Backward, BackwardCtx, Scalar, Tape, Tensor, Var};
use crate::par;
use crate::positional::{alibi_slope, RopeConfig};

/// Default key-tile width of the two-pass path.
pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    /// RoPE only.
    Rope,
    /// RoPE plus learnable per-head distance biases.
    RopeBias,
    /// Fixed ALiBi slopes, no rotation.
    Alibi,
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalMode::Rope => "rope",
            PositionalMode::RopeBias => "rope-bias",
            PositionalMode::Alibi => "alibi",
        })
    }
}

impl FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "rope" => PositionalMode::Rope,
            "rope-bias" => PositionalMode::RopeBias,
            "alibi" => PositionalMode::Alibi,
            other => bail!(Config, "unknown positional mode {:?}", other),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttentionPath {
    Naive,
    TwoPass { tile: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub positional: PositionalMode,
    pub normalizer: NormalizerMode,
    pub path: AttentionPath,
    pub rope_base: f64,
    /// Learnable-bias window `W` (already clamped to the context length).
    pub window: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            bail!(Config, "attention needs at least one head of non-zero width");
        }
        if self.positional != PositionalMode::Alibi {
            RopeConfig::new(self.rope_base, self.head_dim)?;
        }
        match self.path {
            AttentionPath::TwoPass { tile: 0 } => bail!(Config, "tile size must be at least 1"),
            AttentionPath::TwoPass { .. } if !self.normalizer.is_streamable() => {
                bail!(Config, "{} needs whole rows and has no two-pass form", self.normalizer)
            }
            _ => Ok(()),
        }
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn rope(&self) -> Option<RopeConfig> {
        (self.positional != PositionalMode::Alibi)
            .then_some(RopeConfig { base: self.rope_base, head_dim: self.head_dim })
    }
}

// ------------------------------------------------------ single-head API

/// Output of one head evaluated outside a tape.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub weights: Option<HeadWeights>,
    /// Peak scalars held in auxiliary buffers during the call.
    pub aux_peak: usize,
}

fn head_inputs<'a, T: Scalar>(q: &'a Tensor<T>, k: &'a Tensor<T>, v: &'a Tensor<T>) -> Result<HeadView<'a, T>> {
    let (n, dh) = q.dims2()?;
    if k.dims2()? != (n, dh) || v.dims2()? != (n, dh) {
        bail!(Dimension, "q, k, v must share shape {}×{}, got {:?}, {:?}", n, dh, k.shape(), v.shape());
    }
    if n == 0 {
        bail!(Dimension, "attention needs at least one position");
    }
    Ok(HeadView { q: q.data(), k: k.data(), v: v.data(), n, dh })
}

fn head_output<T: Scalar>(fwd: HeadForward<T>, n: usize, dh: usize) -> Result<HeadOutput<T>> {
    let weights = fwd.weights.map(|packed| {
        let mut hw = HeadWeights::new(0, 0, 0, n);
        for i in 0..n {
            hw.row_mut(i).copy_from_slice(&packed[i * (i + 1) / 2..(i + 1) * (i + 2) / 2]);
        }
        hw
    });
    Ok(HeadOutput { output: Tensor::new(&[n, dh], fwd.out)?, weights, aux_peak: fwd.aux_peak })
}

/// Reference path: every score row is materialized and normalized.
/// `q`, `k` are already position-rotated.
pub fn attend_naive<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &HeadSpec<'_, T>,
    capture: bool,
) -> Result<HeadOutput<T>> {
    let h = head_inputs(q, k, v)?;
    head_output(kernel::forward_naive(&h, spec, capture), h.n, h.dh)
}

/// Two-pass tiled path: pass 1 streams key tiles for the running max and
/// exp-sum, pass 2 streams them again to offset, rectify and accumulate.
pub fn attend_two_pass<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &HeadSpec<'_, T>,
    tile: usize,
    capture: bool,
) -> Result<HeadOutput<T>> {
    if !spec.mode.is_streamable() {
        bail!(Config, "{} has no two-pass form", spec.mode);
    }
    if tile == 0 {
        bail!(Config, "tile size must be at least 1");
    }
    let h = head_inputs(q, k, v)?;
    head_output(kernel::forward_two_pass(&h, spec, tile, capture), h.n, h.dh)
}

/// Gradients of one head for an upstream gradient `dout`.
#[derive(Debug, Clone)]
pub struct HeadGradients<T: Scalar> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    /// Same length as the bias table in `spec`, empty otherwise.
    pub dbias: Vec<T>,
    pub dtau: T,
    /// Peak scalars held in auxiliary buffers during the backward pass.
    pub aux_peak: usize,
}

/// Forward then backward of one head along `path`.
pub fn head_gradients<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &HeadSpec<'_, T>,
    path: AttentionPath,
    dout: &Tensor<T>,
) -> Result<HeadGradients<T>> {
    let h = head_inputs(q, k, v)?;
    if dout.shape() != q.shape() {
        bail!(Dimension, "upstream gradient shape {:?} != {:?}", dout.shape(), q.shape());
    }
    let fwd = match path {
        AttentionPath::Naive => kernel::forward_naive(&h, spec, false),
        AttentionPath::TwoPass { tile } => {
            if !spec.mode.is_streamable() {
                bail!(Config, "{} has no two-pass form", spec.mode);
            }
            if tile == 0 {
                bail!(Config, "tile size must be at least 1");
            }
            kernel::forward_two_pass(&h, spec, tile, false)
        }
    };
    let g = kernel::backward(&h, spec, &fwd.saved, dout.data());
    let shape = [h.n, h.dh];
    Ok(HeadGradients {
        dq: Tensor::new(&shape, g.dq)?,
        dk: Tensor::new(&shape, g.dk)?,
        dv: Tensor::new(&shape, g.dv)?,
        dbias: g.dbias,
        dtau: g.dtau,
        aux_peak: g.aux_peak,
    })
}

// ------------------------------------------------------- score tape op

/// Bias input of [`Tape::causal_scores`].
#[derive(Debug, Clone, Copy)]
pub enum ScoreBias {
    None,
    /// `[W+1]` learnable table.
    Table(Var),
    /// Fixed ALiBi slope.
    Alibi(f64),
}

struct ScoresOp<T> {
    n: usize,
    dh: usize,
    scale: T,
    table: bool,
}

impl<T: Scalar> Backward<T> for ScoresOp<T> {
    fn name(&self) -> &'static str {
        "causal_scores"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let (n, dh) = (self.n, self.dh);
        let (q, k) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut dq = vec![T::zero(); n * dh];
        let mut dk = vec![T::zero(); n * dh];
        let mut db = self.table.then(|| vec![T::zero(); ctx.inputs[2].numel()]);
        for i in 0..n {
            for j in 0..=i {
                let d = ctx.grad[i * n + j];
                for c in 0..dh {
                    dq[i * dh + c] += d * self.scale * k[j * dh + c];
                    dk[j * dh + c] += d * self.scale * q[i * dh + c];
                }
                if let Some(b) = db.as_mut().and_then(|b| b.get_mut(i - j)) {
                    *b += d;
                }
            }
        }
        let mut out = vec![Some(dq), Some(dk)];
        if let Some(db) = db {
            out.push(Some(db));
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Causal score matrix of one head, `s_ij = ⟨q_i, k_j⟩/√d_h + b_{i−j}`
    /// for `j ≤ i`; entries above the diagonal are 0.
    pub fn causal_scores(&mut self, q: Var, k: Var, bias: ScoreBias) -> Result<Var> {
        let (n, dh) = self.value(q).dims2()?;
        if self.value(k).dims2()? != (n, dh) {
            bail!(Dimension, "q and k shapes differ");
        }
        let scale = kernel::scale_for::<T>(dh);
        let table;
        let hb = match bias {
            ScoreBias::None => HeadBias::None,
            ScoreBias::Table(b) => {
                table = self.value(b).data().to_vec();
                HeadBias::Table(&table)
            }
            ScoreBias::Alibi(m) => HeadBias::Alibi(T::of(m)),
        };
        let view = HeadView { q: self.value(q).data(), k: self.value(k).data(), v: self.value(k).data(), n, dh };
        let mut s = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                s[i * n + j] = view.score(&hb, scale, i, j);
            }
        }
        let out = Tensor::new(&[n, n], s)?;
        let (inputs, has_table) = match bias {
            ScoreBias::Table(b) => (vec![q, k, b], true),
            _ => (vec![q, k], false),
        };
        let op = ScoresOp { n, dh, scale, table: has_table };
        Ok(self.push(out, &inputs, Box::new(op)))
    }
}

// --------------------------------------------------- fused multi-head op

/// Shape and mode arguments of [`Tape::causal_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionArgs {
    pub batch: usize,
    pub seq: usize,
    pub layer: usize,
    pub capture: bool,
}

/// Result of a fused attention call.
pub struct AttentionResult {
    pub output: Var,
    pub capture: Option<WeightCapture>,
    /// Largest per-head auxiliary buffer footprint, in scalars.
    pub aux_peak: usize,
}

struct AttentionOp<T> {
    cfg: AttentionConfig,
    args: AttentionArgs,
    saved: Vec<HeadSaved<T>>,
    has_table: bool,
    has_tau: bool,
}

fn gather<T: Scalar>(x: &[T], b: usize, h: usize, n: usize, heads: usize, dh: usize) -> Vec<T> {
    let width = heads * dh;
    let mut out = Vec::with_capacity(n * dh);
    for r in b * n..(b + 1) * n {
        out.extend_from_slice(&x[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

fn scatter<T: Scalar>(dst: &mut [T], src: &[T], b: usize, h: usize, n: usize, heads: usize, dh: usize) {
    let width = heads * dh;
    for (i, r) in (b * n..(b + 1) * n).enumerate() {
        dst[r * width + h * dh..r * width + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn head_spec<'a, T: Scalar>(
    cfg: &AttentionConfig,
    table: Option<&'a [T]>,
    tau: Option<&[T]>,
    h: usize,
) -> HeadSpec<'a, T> {
    let w = cfg.window + 1;
    let bias = match (cfg.positional, table) {
        (PositionalMode::RopeBias, Some(t)) => HeadBias::Table(&t[h * w..(h + 1) * w]),
        (PositionalMode::Alibi, _) => HeadBias::Alibi(T::of(alibi_slope(h, cfg.heads))),
        _ => HeadBias::None,
    };
    HeadSpec { mode: cfg.normalizer, bias, tau: tau.map_or_else(|| T::of(cfg.normalizer.tau_init()), |t| t[h]) }
}

impl<T: Scalar> Backward<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let (cfg, args) = (&self.cfg, &self.args);
        let (heads, dh, n) = (cfg.heads, cfg.head_dim, args.seq);
        let (q, k, v) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let mut next = 3;
        let table = self.has_table.then(|| {
            next += 1;
            ctx.inputs[next - 1].data()
        });
        let tau = self.has_tau.then(|| ctx.inputs[next].data());
        let grad = ctx.grad;

        let per_head = par::map_indexed(args.batch * heads, |idx| {
            let (b, h) = (idx / heads, idx % heads);
            let (qh, kh, vh) =
                (gather(q, b, h, n, heads, dh), gather(k, b, h, n, heads, dh), gather(v, b, h, n, heads, dh));
            let dout = gather(grad, b, h, n, heads, dh);
            let view = HeadView { q: &qh, k: &kh, v: &vh, n, dh };
            let spec = head_spec(cfg, table, tau, h);
            kernel::backward(&view, &spec, &self.saved[idx], &dout)
        });

        let total = args.batch * n * heads * dh;
        let mut dq = vec![T::zero(); total];
        let mut dk = vec![T::zero(); total];
        let mut dv = vec![T::zero(); total];
        let w = cfg.window + 1;
        let mut dtable = self.has_table.then(|| vec![T::zero(); heads * w]);
        let mut dtau = self.has_tau.then(|| vec![T::zero(); heads]);
        for (idx, g) in per_head.iter().enumerate() {
            let (b, h) = (idx / heads, idx % heads);
            scatter(&mut dq, &g.dq, b, h, n, heads, dh);
            scatter(&mut dk, &g.dk, b, h, n, heads, dh);
            scatter(&mut dv, &g.dv, b, h, n, heads, dh);
            if let Some(dt) = dtable.as_mut() {
                for (a, &x) in dt[h * w..(h + 1) * w].iter_mut().zip(&g.dbias) {
                    *a += x;
                }
            }
            if let Some(dt) = dtau.as_mut() {
                dt[h] += g.dtau;
            }
        }
        let mut out = vec![Some(dq), Some(dk), Some(dv)];
        if let Some(dt) = dtable {
            out.push(Some(dt));
        }
        if let Some(dt) = dtau {
            out.push(Some(dt));
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Causal attention over `q, k, v` laid out `[(batch·seq) × (heads·d_h)]`
    /// (queries and keys already rotated). `bias` is the layer's
    /// `[heads × (W+1)]` table, required in [`PositionalMode::RopeBias`];
    /// `tau` is the layer's `[heads]` offsets, required by normalizers with a
    /// learnable offset.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        tau: Option<Var>,
        cfg: &AttentionConfig,
        args: AttentionArgs,
    ) -> Result<AttentionResult> {
        cfg.validate()?;
        let (heads, dh, n) = (cfg.heads, cfg.head_dim, args.seq);
        let expect = (args.batch * n, heads * dh);
        for (name, x) in [("q", q), ("k", k), ("v", v)] {
            if self.value(x).dims2()? != expect {
                bail!(Dimension, "{} has shape {:?}, expected {}×{}", name, self.value(x).shape(), expect.0, expect.1);
            }
        }
        if n == 0 {
            bail!(Dimension, "attention needs at least one position");
        }
        let bias = match (cfg.positional, bias) {
            (PositionalMode::RopeBias, Some(b)) => {
                if self.value(b).numel() != heads * (cfg.window + 1) {
                    bail!(Dimension, "bias table must hold {}×{} values", heads, cfg.window + 1);
                }
                Some(b)
            }
            (PositionalMode::RopeBias, None) => bail!(Contract, "rope-bias mode needs a bias table"),
            _ => None,
        };
        let tau = match (cfg.normalizer.has_tau(), tau) {
            (true, Some(t)) => {
                if self.value(t).numel() != heads {
                    bail!(Dimension, "τ must hold {} values", heads);
                }
                Some(t)
            }
            (true, None) => bail!(Contract, "{} needs per-head offsets", cfg.normalizer),
            (false, _) => None,
        };

        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let table = bias.map(|b| self.value(b).data());
        let taus = tau.map(|t| self.value(t).data());
        let per_head: Vec<HeadForward<T>> = par::map_indexed(args.batch * heads, |idx| {
            let (b, h) = (idx / heads, idx % heads);
            let (qh, kh, vh) =
                (gather(qd, b, h, n, heads, dh), gather(kd, b, h, n, heads, dh), gather(vd, b, h, n, heads, dh));
            let view = HeadView { q: &qh, k: &kh, v: &vh, n, dh };
            let spec = head_spec(cfg, table, taus, h);
            match cfg.path {
                AttentionPath::Naive => kernel::forward_naive(&view, &spec, args.capture),
                AttentionPath::TwoPass { tile } => kernel::forward_two_pass(&view, &spec, tile, args.capture),
            }
        });

        let mut out = vec![T::zero(); args.batch * n * heads * dh];
        let mut capture = args.capture.then(WeightCapture::default);
        let mut aux_peak = 0;
        let mut saved = Vec::with_capacity(per_head.len());
        for (idx, f) in per_head.into_iter().enumerate() {
            let (b, h) = (idx / heads, idx % heads);
            scatter(&mut out, &f.out, b, h, n, heads, dh);
            aux_peak = aux_peak.max(f.aux_peak);
            if let (Some(c), Some(packed)) = (capture.as_mut(), f.weights) {
                let mut hw = HeadWeights::new(args.layer, h, b, n);
                for i in 0..n {
                    hw.row_mut(i).copy_from_slice(&packed[i * (i + 1) / 2..(i + 1) * (i + 2) / 2]);
                }
                c.heads.push(hw);
            }
            saved.push(f.saved);
        }
        let out = Tensor::new(&[args.batch * n, heads * dh], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        inputs.extend(tau);
        let op = AttentionOp { cfg: *cfg, args, saved, has_table: bias.is_some(), has_tau: tau.is_some() };
        let output = self.push(out, &inputs, Box::new(op));
        Ok(AttentionResult { output, capture, aux_peak })
    }
}

/// Projection weights of one multi-head attention block, on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Intermediate values of [`multi_head`], kept for diagnostics.
pub struct MhaOutput {
    pub output: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub capture: Option<WeightCapture>,
    pub aux_peak: usize,
}

/// Project → rotate → attend → concat → output projection, for
/// `x[(batch·seq) × d]`. Positions restart at `pos_offset` in every sequence.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &MhaVars,
    bias: Option<Var>,
    tau: Option<Var>,
    cfg: &AttentionConfig,
    args: AttentionArgs,
    pos_offset: usize,
) -> Result<MhaOutput> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let (qr, kr) = match cfg.rope() {
        Some(rope) => {
            let positions: Vec<usize> = (0..args.batch * args.seq).map(|r| r % args.seq + pos_offset).collect();
            (tape.rope(q, &rope, &positions)?, tape.rope(k, &rope, &positions)?)
        }
        None => (q, k),
    };
    let res = tape.causal_attention(qr, kr, v, bias, tau, cfg, args)?;
    let output = tape.matmul(res.output, w.wo)?;
    Ok(MhaOutput { output, q, k, v, capture: res.capture, aux_peak: res.aux_peak })
}
