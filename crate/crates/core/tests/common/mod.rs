//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use lazy_attention::attention::{
    AttentionArgs, AttentionConfig, AttentionPath, HeadBias, HeadSpec, MhaVars, PositionalMode, ScoreBias,
};
use lazy_attention::model::{block_forward, BlockVars};
use lazy_attention::normalizer::NormalizerMode;
use lazy_attention::numeric::gradcheck::{check, FD_STEP};
use lazy_attention::numeric::{Mask, Scalar, Tape, Tensor, Var};
use lazy_attention::positional::RopeConfig;
use lazy_attention::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_SEEDS: u64 = 20;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, r)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// `Σ x ⊙ R` for a fixed random `R`: turns any tensor into a scalar whose
/// gradient exercises every output entry.
pub fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.constant(randn(&shape, 1.0, &mut rng(seed ^ 0x9e37)));
    let y = tape.mul(x, r)?;
    Ok(tape.sum(y))
}

pub type GradFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
pub type GradBuild = Box<dyn Fn(u64) -> (Vec<Tensor<f64>>, GradFn)>;

/// One differentiable op: inputs for a seed and the scalar function.
pub struct GradCase {
    pub name: String,
    pub build: GradBuild,
}

fn case(name: impl Into<String>, build: impl Fn(u64) -> (Vec<Tensor<f64>>, GradFn) + 'static) -> GradCase {
    GradCase { name: name.into(), build: Box::new(build) }
}

/// Worst norm-wise relative error of a case over `seeds` seeds.
pub fn worst_error(c: &GradCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|s| {
            let (inputs, f) = (c.build)(s);
            check(&inputs, f, FD_STEP).unwrap_or_else(|e| panic!("{}: {e}", c.name)).max_rel_error()
        })
        .fold(0.0, f64::max)
}

pub const ALL_MODES: [NormalizerMode; 6] = [
    NormalizerMode::Softmax,
    NormalizerMode::Sparsemax,
    NormalizerMode::ElasticGlobal { tau_init: 0.0 },
    NormalizerMode::ElasticPerQuery { tau_init: 0.0 },
    NormalizerMode::ElasticPerQuery { tau_init: -1.0 },
    NormalizerMode::FixedPerQuery,
];

pub const STREAMABLE_MODES: [NormalizerMode; 5] = [
    NormalizerMode::Softmax,
    NormalizerMode::ElasticGlobal { tau_init: 0.0 },
    NormalizerMode::ElasticPerQuery { tau_init: 0.0 },
    NormalizerMode::ElasticPerQuery { tau_init: -1.0 },
    NormalizerMode::FixedPerQuery,
];

/// τ values used in gradient checks: near each mode's init, where rows are
/// partly sparse.
fn tau_for(mode: NormalizerMode, r: &mut ChaCha8Rng) -> f64 {
    match mode {
        NormalizerMode::ElasticGlobal { .. } => r.random_range(-0.3..-0.05),
        _ => r.random_range(-1.2..-0.2),
    }
}

fn core_cases() -> Vec<GradCase> {
    let mut v = vec![
        case("matmul", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[3, 4], 1.0, &mut r), randn(&[4, 5], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.matmul(x[0], x[1])?;
                    probe(t, y, s)
                }),
            )
        }),
        case("add", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[3, 4], 1.0, &mut r), randn(&[3, 4], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.add(x[0], x[1])?;
                    probe(t, y, s)
                }),
            )
        }),
        case("mul", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[3, 4], 1.0, &mut r), randn(&[3, 4], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.mul(x[0], x[1])?;
                    probe(t, y, s)
                }),
            )
        }),
        case("mul-scalar-broadcast", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[3, 4], 1.0, &mut r), randn(&[1], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.mul(x[0], x[1])?;
                    probe(t, y, s)
                }),
            )
        }),
        case("scale", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[6], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.scale(x[0], -1.7);
                    probe(t, y, s)
                }),
            )
        }),
        case("relu", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[4, 5], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.relu(x[0]);
                    probe(t, y, s)
                }),
            )
        }),
        case("exp", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[4, 5], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.exp(x[0]);
                    probe(t, y, s)
                }),
            )
        }),
        case("gelu", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[4, 5], 2.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.gelu(x[0]);
                    probe(t, y, s)
                }),
            )
        }),
        case("sum+mean", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[4, 5], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let e = t.exp(x[0]);
                    let m = t.mean(e);
                    let q = t.mul(m, m)?;
                    let sm = t.sum(x[0]);
                    t.add(q, sm)
                }),
            )
        }),
        case("softmax", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[4, 6], 1.5, &mut r)],
                Box::new(move |t, x| {
                    let y = t.softmax_lastdim(x[0], None)?;
                    probe(t, y, s)
                }),
            )
        }),
        case("softmax-causal", |s| {
            let mut r = rng(s);
            (
                vec![randn(&[5, 5], 1.5, &mut r)],
                Box::new(move |t, x| {
                    let y = t.softmax_lastdim(x[0], Some(&Mask::Causal))?;
                    probe(t, y, s)
                }),
            )
        }),
        case("layernorm", |s| {
            let mut r = rng(s);
            let x = randn(&[3, 8], 2.0, &mut r);
            let g = uniform(&[8], 0.5, 1.5, &mut r);
            let b = randn(&[8], 0.5, &mut r);
            (
                vec![x, g, b],
                Box::new(move |t, x| {
                    let y = t.layernorm(x[0], x[1], x[2])?;
                    probe(t, y, s)
                }),
            )
        }),
        case("cross-entropy", |s| {
            let mut r = rng(s);
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
            (vec![randn(&[4, 7], 2.0, &mut r)], Box::new(move |t, x| t.cross_entropy(x[0], &targets)))
        }),
        case("embedding", |s| {
            let mut r = rng(s);
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
            (
                vec![randn(&[5, 3], 1.0, &mut r)],
                Box::new(move |t, x| {
                    let y = t.embedding(x[0], &ids)?;
                    probe(t, y, s)
                }),
            )
        }),
    ];
    v.push(case("rope", |s| {
        let mut r = rng(s);
        let offset = r.random_range(0..50usize);
        let cfg = RopeConfig::new(100.0, 4).unwrap();
        (
            vec![randn(&[5, 8], 1.0, &mut r)],
            Box::new(move |t, x| {
                let pos: Vec<usize> = (offset..offset + 5).collect();
                let y = t.rope(x[0], &cfg, &pos)?;
                probe(t, y, s)
            }),
        )
    }));
    v
}

fn score_cases() -> Vec<GradCase> {
    let mut v = Vec::new();
    for (label, kind) in [("none", 0), ("table", 1), ("alibi", 2)] {
        v.push(case(format!("scores/{label}"), move |s| {
            let mut r = rng(s);
            let mut inputs = vec![randn(&[6, 4], 1.0, &mut r), randn(&[6, 4], 1.0, &mut r)];
            if kind == 1 {
                // window 3 < n: distances 4 and 5 fall outside the table
                inputs.push(randn(&[4], 0.5, &mut r));
            }
            (
                inputs,
                Box::new(move |t, x| {
                    let bias = match kind {
                        1 => ScoreBias::Table(x[2]),
                        2 => ScoreBias::Alibi(0.25),
                        _ => ScoreBias::None,
                    };
                    let y = t.causal_scores(x[0], x[1], bias)?;
                    probe(t, y, s)
                }),
            )
        }));
    }
    v
}

fn normalizer_cases() -> Vec<GradCase> {
    ALL_MODES
        .iter()
        .map(|&mode| {
            case(format!("normalize/{mode}"), move |s| {
                let mut r = rng(s);
                let scores = randn(&[6, 6], 1.5, &mut r);
                let mut inputs = vec![scores];
                if mode.has_tau() {
                    inputs.push(Tensor::scalar(tau_for(mode, &mut r)));
                }
                (
                    inputs,
                    Box::new(move |t, x| {
                        let y = t.normalize_causal(x[0], x.get(1).copied(), mode)?;
                        probe(t, y, s)
                    }),
                )
            })
        })
        .collect()
}

/// Fused multi-head attention over `batch=2, n=6, heads=2, d_h=4`.
fn attention_cases() -> Vec<GradCase> {
    let mut v = Vec::new();
    for mode in ALL_MODES {
        for path in [AttentionPath::Naive, AttentionPath::TwoPass { tile: 4 }] {
            if !mode.is_streamable() && path != AttentionPath::Naive {
                continue;
            }
            for positional in [PositionalMode::RopeBias, PositionalMode::Alibi] {
                let cfg = AttentionConfig {
                    heads: 2,
                    head_dim: 4,
                    positional,
                    normalizer: mode,
                    path,
                    rope_base: 100.0,
                    window: 3,
                };
                let pname = match path {
                    AttentionPath::Naive => "naive".to_string(),
                    AttentionPath::TwoPass { tile } => format!("two-pass:{tile}"),
                };
                v.push(case(format!("attention/{mode}/{positional}/{pname}"), move |s| {
                    let mut r = rng(s);
                    let mut inputs: Vec<Tensor<f64>> = (0..3).map(|_| randn(&[12, 8], 1.0, &mut r)).collect();
                    let has_bias = positional == PositionalMode::RopeBias;
                    if has_bias {
                        inputs.push(randn(&[2, 4], 0.5, &mut r));
                    }
                    if mode.has_tau() {
                        let taus = [tau_for(mode, &mut r), tau_for(mode, &mut r)];
                        inputs.push(Tensor::new(&[2], taus.to_vec()).unwrap());
                    }
                    (
                        inputs,
                        Box::new(move |t, x| {
                            let mut rest = x[3..].iter().copied();
                            let bias = if has_bias { rest.next() } else { None };
                            let tau = rest.next();
                            let args = AttentionArgs { batch: 2, seq: 6, layer: 0, capture: false };
                            let out = t.causal_attention(x[0], x[1], x[2], bias, tau, &cfg, args)?;
                            probe(t, out.output, s)
                        }),
                    )
                }));
            }
        }
    }
    v
}

/// A whole pre-LN block (`d=8`, 2 heads, batch 2, n=5) with every
/// parameter checked.
fn block_cases() -> Vec<GradCase> {
    let mut v = Vec::new();
    for (label, positional, mode) in [
        ("lazy", PositionalMode::RopeBias, NormalizerMode::ElasticPerQuery { tau_init: -1.0 }),
        ("baseline", PositionalMode::Rope, NormalizerMode::Softmax),
    ] {
        v.push(case(format!("block/{label}"), move |s| {
            let mut r = rng(s);
            let d = 8;
            let mut inputs = vec![
                randn(&[10, d], 1.0, &mut r),
                uniform(&[d], 0.5, 1.5, &mut r),
                randn(&[d], 0.2, &mut r),
                randn(&[d, d], 0.5, &mut r),
                randn(&[d, d], 0.5, &mut r),
                randn(&[d, d], 0.5, &mut r),
                randn(&[d, d], 0.5, &mut r),
                uniform(&[d], 0.5, 1.5, &mut r),
                randn(&[d], 0.2, &mut r),
                randn(&[d, 4 * d], 0.5, &mut r),
                randn(&[4 * d, d], 0.5, &mut r),
            ];
            let elastic = mode.has_tau();
            if positional == PositionalMode::RopeBias {
                inputs.push(randn(&[2, 4], 0.5, &mut r));
            }
            if elastic {
                inputs.push(Tensor::new(&[2], vec![tau_for(mode, &mut r), tau_for(mode, &mut r)]).unwrap());
            }
            let cfg = AttentionConfig {
                heads: 2,
                head_dim: 4,
                positional,
                normalizer: mode,
                path: AttentionPath::TwoPass { tile: 2 },
                rope_base: 100.0,
                window: 3,
            };
            (
                inputs,
                Box::new(move |t, x| {
                    let mut extra = x[11..].iter().copied();
                    let vars = BlockVars {
                        ln1_gain: x[1],
                        ln1_bias: x[2],
                        mha: MhaVars { wq: x[3], wk: x[4], wv: x[5], wo: x[6] },
                        ln2_gain: x[7],
                        ln2_bias: x[8],
                        w1: x[9],
                        w2: x[10],
                        bias: (positional == PositionalMode::RopeBias).then(|| extra.next().unwrap()),
                        tau: elastic.then(|| extra.next().unwrap()),
                    };
                    let args = AttentionArgs { batch: 2, seq: 5, layer: 0, capture: false };
                    let out = block_forward(t, x[0], &vars, &cfg, args)?;
                    probe(t, out.output, s)
                }),
            )
        }));
    }
    v
}

/// Every differentiable operation, grouped.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut v = core_cases();
    v.extend(score_cases());
    v.extend(normalizer_cases());
    v.extend(attention_cases());
    v.extend(block_cases());
    v
}

// ------------------------------------------------------------ oracles

/// Sparsemax by bisection on the threshold: find τ with Σ max(z−τ, 0) = 1.
pub fn sparsemax_bisection(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mass: f64 = z.iter().map(|&x| (x - mid).max(0.0)).sum();
        if mass > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Scalar-loop reference for one head: explicit RoPE-free scores,
/// normalizer written out per mode, dense weighted sum.
pub fn reference_head(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    mode: NormalizerMode,
    bias: &dyn Fn(usize) -> f64,
    tau: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, dh) = (q.shape()[0], q.shape()[1]);
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let s: Vec<f64> = (0..=i)
            .map(|j| (0..dh).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (dh as f64).sqrt() + bias(i - j))
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        let i1 = (i + 1) as f64;
        let a: Vec<f64> = match mode {
            NormalizerMode::Softmax => p,
            NormalizerMode::Sparsemax => sparsemax_bisection(&s),
            NormalizerMode::ElasticGlobal { .. } => p.iter().map(|x| (x + tau).max(0.0)).collect(),
            NormalizerMode::ElasticPerQuery { .. } => p.iter().map(|x| (x + tau / i1).max(0.0)).collect(),
            NormalizerMode::FixedPerQuery => p.iter().map(|x| (x - 1.0 / i1).max(0.0)).collect(),
        };
        let o: Vec<f64> = (0..dh).map(|c| (0..=i).map(|j| a[j] * v.row(j)[c]).sum()).collect();
        weights.push(a);
        out.push(o);
    }
    (weights, out)
}

pub fn head_bias_table(table: &[f64]) -> HeadBias<'_, f64> {
    HeadBias::Table(table)
}

pub fn spec(mode: NormalizerMode, bias: HeadBias<'_, f64>, tau: f64) -> HeadSpec<'_, f64> {
    HeadSpec { mode, bias, tau }
}

/// Random `[n × d_h]` q, k, v.
pub fn qkv<T: Scalar>(n: usize, dh: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut r = rng(seed);
    let q = randn(&[n, dh], 1.0, &mut r).cast();
    let k = randn(&[n, dh], 1.0, &mut r).cast();
    let v = randn(&[n, dh], 1.0, &mut r).cast();
    (q, k, v)
}
