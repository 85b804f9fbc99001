//! Byte-level pre-LN transformer language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head, AttentionArgs, AttentionConfig, AttentionPath, MhaVars, PositionalMode, DEFAULT_TILE,
};
use crate::capture::WeightCapture;
use crate::error::{bail, Result};
use crate::normalizer::{ElasticOffsets, NormalizerMode};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::positional::{BiasTable, DEFAULT_BIAS_WINDOW};

/// Byte tokens 0..=255 plus a beginning-of-document marker.
pub const BYTE_VOCAB: usize = 257;
pub const BOS: usize = 256;
/// Reserved id appended to the vocabulary when the Mask@k probe is on.
pub const MASK_ID: usize = 257;
/// Standard deviation of the normal weight init.
pub const INIT_STD: f64 = 0.02;
/// Longest input accepted in extrapolation mode, as a multiple of `n_ctx`.
pub const MAX_EXTRAPOLATION: usize = 16;
/// RoPE base of the desk-scale presets. `RopeConfig` alone defaults to 10000.
pub const PRESET_ROPE_BASE: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub n_ctx: usize,
    pub positional: PositionalMode,
    pub normalizer: NormalizerMode,
    pub path: AttentionPath,
    pub rope_base: f64,
    /// Requested bias window; the effective one is `min(window, n_ctx)`.
    pub window: usize,
    /// Keep τ at its initial value.
    pub freeze_tau: bool,
    /// Keep the distance-bias table at zero.
    pub freeze_bias: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale shape with RoPE + softmax attention.
    pub fn baseline() -> Self {
        Self {
            layers: 2,
            d_model: 128,
            heads: 4,
            vocab: BYTE_VOCAB,
            n_ctx: 128,
            positional: PositionalMode::Rope,
            normalizer: NormalizerMode::Softmax,
            path: AttentionPath::TwoPass { tile: DEFAULT_TILE },
            rope_base: PRESET_ROPE_BASE,
            window: DEFAULT_BIAS_WINDOW,
            freeze_tau: false,
            freeze_bias: false,
            seed: 0,
        }
    }

    /// RoPE + learnable distance biases + Elastic-Softmax with τ₀ = −1.
    pub fn lazy() -> Self {
        Self { positional: PositionalMode::RopeBias, normalizer: NormalizerMode::elastic(), ..Self::baseline() }
    }

    /// Lazy Attention with the distance biases frozen at zero.
    pub fn without_positional(self) -> Self {
        Self { freeze_bias: true, ..self }
    }

    /// Lazy Attention with τ frozen at zero, i.e. plain softmax weights.
    pub fn without_elastic(self) -> Self {
        Self { normalizer: NormalizerMode::ElasticPerQuery { tau_init: 0.0 }, freeze_tau: true, ..self }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn effective_window(&self) -> usize {
        self.window.min(self.n_ctx)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            head_dim: self.head_dim(),
            positional: self.positional,
            normalizer: self.normalizer,
            path: self.path,
            rope_base: self.rope_base,
            window: self.effective_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            bail!(Config, "model needs at least one layer");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "d_model {} is not divisible by {} heads", self.d_model, self.heads);
        }
        if self.n_ctx < 2 {
            bail!(Config, "context length must be at least 2, got {}", self.n_ctx);
        }
        if self.vocab < BYTE_VOCAB {
            bail!(Config, "vocabulary must cover bytes and BOS ({}), got {}", BYTE_VOCAB, self.vocab);
        }
        self.attention().validate()
    }
}

/// How a parameter is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix: AdamW with decoupled weight decay.
    Decay,
    /// Layer-norm affine, distance biases, offsets: no weight decay.
    NoDecay,
    /// Not trained.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Present in [`PositionalMode::RopeBias`].
    pub bias: Option<BiasTable<T>>,
    /// Present for normalizers with a learnable offset.
    pub tau: Option<ElasticOffsets<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    pub unembed: Tensor<T>,
}

/// Per-forward options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record attention weights.
    pub capture: bool,
    /// Keep handles to per-layer hidden states and Q/K/V projections.
    pub trace: bool,
    /// Accept inputs longer than `n_ctx` (up to `MAX_EXTRAPOLATION·n_ctx`).
    pub extrapolate: bool,
}

/// Per-layer intermediates of a traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Residual stream entering each layer, plus the final one: `L + 1` entries.
    pub hidden: Vec<Var>,
    /// Pre-rotation Q/K/V projections per layer.
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

pub struct ForwardOutput {
    /// `[(batch·seq) × vocab]`.
    pub logits: Var,
    pub capture: Option<WeightCapture>,
    pub trace: Option<Trace>,
    /// Parameter leaves in declared order.
    pub params: Vec<Var>,
}

/// Parameters of one block, on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub mha: MhaVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub w2: Var,
    /// `[heads × (W+1)]` distance biases in rope-bias mode.
    pub bias: Option<Var>,
    /// `[heads]` offsets for normalizers that learn one.
    pub tau: Option<Var>,
}

pub struct BlockOutput {
    pub output: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub capture: Option<WeightCapture>,
}

/// `X̂ = X + MHA(LN(X))`, `X' = X̂ + FFN(LN(X̂))` with a 4d GELU FFN.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &BlockVars,
    attn: &AttentionConfig,
    args: AttentionArgs,
) -> Result<BlockOutput> {
    let h = tape.layernorm(x, vars.ln1_gain, vars.ln1_bias)?;
    let mha = multi_head(tape, h, &vars.mha, vars.bias, vars.tau, attn, args, 0)?;
    let x_hat = tape.add(x, mha.output)?;
    let h2 = tape.layernorm(x_hat, vars.ln2_gain, vars.ln2_bias)?;
    let up = tape.matmul(h2, vars.w1)?;
    let act = tape.gelu(up);
    let down = tape.matmul(act, vars.w2)?;
    let output = tape.add(x_hat, down)?;
    Ok(BlockOutput { output, q: mha.q, k: mha.k, v: mha.v, capture: mha.capture })
}

impl<T: Scalar> Model<T> {
    /// Scaled-normal init: std 0.02, output projections scaled by `1/√(2L)`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v, l) = (config.d_model, config.vocab, config.layers);
        let out_std = INIT_STD / ((2 * l) as f64).sqrt();
        let trainable = |t: Tensor<T>| t.with_requires_grad(true);
        let embed = trainable(Tensor::randn(&[v, d], INIT_STD, &mut rng));
        let layers = (0..l)
            .map(|_| LayerParams {
                ln1_gain: trainable(Tensor::full(&[d], T::one())),
                ln1_bias: trainable(Tensor::zeros(&[d])),
                wq: trainable(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
                wk: trainable(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
                wv: trainable(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
                wo: trainable(Tensor::randn(&[d, d], out_std, &mut rng)),
                ln2_gain: trainable(Tensor::full(&[d], T::one())),
                ln2_bias: trainable(Tensor::zeros(&[d])),
                w1: trainable(Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng)),
                w2: trainable(Tensor::randn(&[4 * d, d], out_std, &mut rng)),
            })
            .collect();
        let bias = (config.positional == PositionalMode::RopeBias)
            .then(|| BiasTable::zeros(l, config.heads, config.effective_window()));
        let tau =
            config.normalizer.has_tau().then(|| ElasticOffsets::new(l, config.heads, config.normalizer.tau_init()));
        let unembed = trainable(Tensor::randn(&[d, v], INIT_STD, &mut rng));
        Ok(Self {
            config,
            embed,
            layers,
            bias,
            tau,
            lnf_gain: trainable(Tensor::full(&[d], T::one())),
            lnf_bias: trainable(Tensor::zeros(&[d])),
            unembed,
        })
    }

    fn bias_kind(&self) -> ParamKind {
        if self.config.freeze_bias {
            ParamKind::Frozen
        } else {
            ParamKind::NoDecay
        }
    }

    fn tau_kind(&self) -> ParamKind {
        if self.config.freeze_tau {
            ParamKind::Frozen
        } else {
            ParamKind::NoDecay
        }
    }

    /// Visits every parameter in declared order (the checkpoint order).
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        use ParamKind::*;
        f("embed", Decay, &self.embed);
        for (i, p) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("layers.{i}.{s}");
            f(&name("ln1_gain"), NoDecay, &p.ln1_gain);
            f(&name("ln1_bias"), NoDecay, &p.ln1_bias);
            f(&name("wq"), Decay, &p.wq);
            f(&name("wk"), Decay, &p.wk);
            f(&name("wv"), Decay, &p.wv);
            f(&name("wo"), Decay, &p.wo);
            f(&name("ln2_gain"), NoDecay, &p.ln2_gain);
            f(&name("ln2_bias"), NoDecay, &p.ln2_bias);
            f(&name("w1"), Decay, &p.w1);
            f(&name("w2"), Decay, &p.w2);
            if let Some(b) = &self.bias {
                f(&name("distance_bias"), self.bias_kind(), b.layer(i));
            }
            if let Some(t) = &self.tau {
                f(&name("tau"), self.tau_kind(), t.layer(i));
            }
        }
        f("lnf_gain", NoDecay, &self.lnf_gain);
        f("lnf_bias", NoDecay, &self.lnf_bias);
        f("unembed", Decay, &self.unembed);
    }

    /// Mutable counterpart of [`Model::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        use ParamKind::*;
        let (bias_kind, tau_kind) = (self.bias_kind(), self.tau_kind());
        f("embed", Decay, &mut self.embed);
        for (i, p) in self.layers.iter_mut().enumerate() {
            let name = |s: &str| format!("layers.{i}.{s}");
            f(&name("ln1_gain"), NoDecay, &mut p.ln1_gain);
            f(&name("ln1_bias"), NoDecay, &mut p.ln1_bias);
            f(&name("wq"), Decay, &mut p.wq);
            f(&name("wk"), Decay, &mut p.wk);
            f(&name("wv"), Decay, &mut p.wv);
            f(&name("wo"), Decay, &mut p.wo);
            f(&name("ln2_gain"), NoDecay, &mut p.ln2_gain);
            f(&name("ln2_bias"), NoDecay, &mut p.ln2_bias);
            f(&name("w1"), Decay, &mut p.w1);
            f(&name("w2"), Decay, &mut p.w2);
            if let Some(b) = &mut self.bias {
                f(&name("distance_bias"), bias_kind, b.layer_mut(i));
            }
            if let Some(t) = &mut self.tau {
                f(&name("tau"), tau_kind, t.layer_mut(i));
            }
        }
        f("lnf_gain", NoDecay, &mut self.lnf_gain);
        f("lnf_bias", NoDecay, &mut self.lnf_bias);
        f("unembed", Decay, &mut self.unembed);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.numel());
        n
    }

    /// Registers every parameter on the tape in declared order; frozen ones
    /// become constants.
    fn register(&self, tape: &mut Tape<T>) -> (Vec<Var>, Var, Vec<BlockVars>, [Var; 3]) {
        let mut vars = Vec::new();
        self.visit(&mut |_, kind, t| {
            let t = t.clone();
            vars.push(if kind == ParamKind::Frozen { tape.constant(t) } else { tape.param(t) });
        });
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("declared order");
        let embed = next();
        let layers = (0..self.layers.len())
            .map(|_| BlockVars {
                ln1_gain: next(),
                ln1_bias: next(),
                mha: MhaVars { wq: next(), wk: next(), wv: next(), wo: next() },
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                w2: next(),
                bias: self.bias.as_ref().map(|_| next()),
                tau: self.tau.as_ref().map(|_| next()),
            })
            .collect();
        let tail = [next(), next(), next()];
        (vars, embed, layers, tail)
    }

    fn check_tokens(&self, batch: &[Vec<usize>], opts: &ForwardOptions) -> Result<usize> {
        let Some(first) = batch.first() else {
            bail!(Contract, "empty batch");
        };
        let n = first.len();
        if n == 0 {
            bail!(Contract, "empty sequence");
        }
        if batch.iter().any(|s| s.len() != n) {
            bail!(Dimension, "sequences in a batch must share one length");
        }
        let limit = if opts.extrapolate { self.config.n_ctx * MAX_EXTRAPOLATION } else { self.config.n_ctx };
        if n > limit {
            bail!(Contract, "sequence of {} tokens exceeds the limit of {}", n, limit);
        }
        Ok(n)
    }

    /// Forward pass over equal-length token sequences.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &[Vec<usize>], opts: ForwardOptions) -> Result<ForwardOutput> {
        let n = self.check_tokens(batch, &opts)?;
        let attn = self.config.attention();
        let (params, embed, layers, [lnf_gain, lnf_bias, unembed]) = self.register(tape);
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let mut x = tape.embedding(embed, &ids)?;
        let mut capture = opts.capture.then(WeightCapture::default);
        let mut trace = opts.trace.then(Trace::default);
        for (layer, lv) in layers.iter().enumerate() {
            if let Some(t) = trace.as_mut() {
                t.hidden.push(x);
            }
            let args = AttentionArgs { batch: batch.len(), seq: n, layer, capture: opts.capture };
            let out = block_forward(tape, x, lv, &attn, args)?;
            if let (Some(c), Some(mc)) = (capture.as_mut(), out.capture) {
                c.extend(mc);
            }
            if let Some(t) = trace.as_mut() {
                t.q.push(out.q);
                t.k.push(out.k);
                t.v.push(out.v);
            }
            x = out.output;
        }
        if let Some(t) = trace.as_mut() {
            t.hidden.push(x);
        }
        let h = tape.layernorm(x, lnf_gain, lnf_bias)?;
        let logits = tape.matmul(h, unembed)?;
        Ok(ForwardOutput { logits, capture, trace, params })
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, inputs, ForwardOptions::default())?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let loss = tape.cross_entropy(out.logits, &flat)?;
        Ok((loss, out))
    }

    /// Logits `[n × vocab]` of one sequence, `n ≤ n_ctx`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[tokens.to_vec()], ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Copies parameters of `other` (same architecture) into `self`,
    /// converting precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config).expect("config already validated");
        let mut src = Vec::new();
        self.visit(&mut |_, _, t| src.push(t.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut(&mut |_, _, t| *t = it.next().expect("same layout"));
        out
    }
}
