//! Analyses over trained checkpoints: perplexity across lengths, density
//! and sink, the repeated-token probe, per-position statistics and
//! parameter exports.

use std::io::Write;

use crate::attention::PositionalMode;
use crate::capture::WeightCapture;
use crate::error::{bail, Result};
use crate::model::{ForwardOptions, Model};
use crate::normalizer::{density_and_sink, DensitySink};
use crate::numeric::{Scalar, Tape, Tensor};
use crate::positional::{alibi_bias, apply_rope};
use crate::training::data::{windows, Batch};

/// Positions covered by the per-position statistics table.
pub const SINK_POSITIONS: usize = 15;

// ----------------------------------------------------------- perplexity

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllStats {
    /// Mean next-token negative log-likelihood, nats.
    pub nll: f64,
    pub windows: usize,
    pub tokens: usize,
}

/// Mean NLL over non-overlapping windows of `len + 1` tokens (`len` scored
/// predictions each), using at most `max_windows` of them.
pub fn mean_nll<T: Scalar>(
    model: &Model<T>,
    tokens: &[u16],
    len: usize,
    max_windows: Option<usize>,
    batch: usize,
) -> Result<NllStats> {
    if len == 0 || tokens.len() < len + 1 {
        bail!(Data, "need at least {} tokens to evaluate length {}, have {}", len + 1, len, tokens.len());
    }
    let all: Vec<&[u16]> = windows(tokens, len + 1).take(max_windows.unwrap_or(usize::MAX)).collect();
    let opts = ForwardOptions { extrapolate: true, ..Default::default() };
    let mut total = 0.0;
    for group in all.chunks(batch.max(1)) {
        let b = Batch::from_windows(group.iter().copied());
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b.inputs, opts)?;
        let targets: Vec<usize> = b.targets.iter().flatten().copied().collect();
        let loss = tape.cross_entropy(out.logits, &targets)?;
        total += tape.value(loss).item()?.f64() * group.len() as f64;
    }
    Ok(NllStats { nll: total / all.len() as f64, windows: all.len(), tokens: all.len() * len })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PplRow {
    pub length: usize,
    pub windows: usize,
    pub nll: f64,
    pub ppl: f64,
}

/// Perplexity at each evaluation length; lengths above `n_ctx` exercise
/// extrapolation.
pub fn eval_ppl<T: Scalar>(model: &Model<T>, tokens: &[u16], lengths: &[usize]) -> Result<Vec<PplRow>> {
    if lengths.is_empty() {
        bail!(Contract, "no evaluation lengths given");
    }
    let longest = *lengths.iter().max().unwrap();
    if tokens.len() < longest + 1 {
        bail!(Data, "text of {} tokens is shorter than the longest eval length {}", tokens.len(), longest);
    }
    lengths
        .iter()
        .map(|&len| {
            let s = mean_nll(model, tokens, len, None, 4)?;
            Ok(PplRow { length: len, windows: s.windows, nll: s.nll, ppl: s.nll.exp() })
        })
        .collect()
}

pub fn write_ppl_csv<W: Write>(rows: &[PplRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["length", "windows", "nll", "ppl"])?;
    for r in rows {
        w.write_record(&[r.length.to_string(), r.windows.to_string(), r.nll.to_string(), r.ppl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// -------------------------------------------------------- density / sink

/// Density and sink over non-overlapping `n_ctx` windows of `tokens`.
pub fn measure_density<T: Scalar>(model: &Model<T>, tokens: &[u16], max_windows: Option<usize>) -> Result<DensitySink> {
    let capture = capture_windows(model, tokens, max_windows)?;
    density_and_sink(&capture)
}

/// Attention weights for non-overlapping `n_ctx`-token windows of `tokens`.
pub fn capture_windows<T: Scalar>(
    model: &Model<T>,
    tokens: &[u16],
    max_windows: Option<usize>,
) -> Result<WeightCapture> {
    let n = model.config.n_ctx;
    if tokens.len() < n {
        bail!(Data, "need at least {} tokens, have {}", n, tokens.len());
    }
    let seqs: Vec<Vec<usize>> = windows(tokens, n)
        .take(max_windows.unwrap_or(usize::MAX))
        .map(|w| w.iter().map(|&t| t as usize).collect())
        .collect();
    let mut capture = WeightCapture::default();
    for (base, group) in seqs.chunks(8).enumerate() {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, group, ForwardOptions { capture: true, ..Default::default() })?;
        let mut c = out.capture.unwrap_or_default();
        for h in &mut c.heads {
            h.seq += base * 8;
        }
        capture.extend(c);
    }
    Ok(capture)
}

pub fn write_density_csv<W: Write>(stats: &DensitySink, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "density_pct", "sink_pct"])?;
    for h in &stats.per_head {
        w.write_record(&[h.layer.to_string(), h.head.to_string(), h.density_pct.to_string(), h.sink_pct.to_string()])?;
    }
    w.write_record(&["all".into(), "all".into(), stats.density_pct.to_string(), stats.sink_pct.to_string()])?;
    w.flush()?;
    Ok(())
}

// ------------------------------------------------- repeated-token probe

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub layer: usize,
    pub head: usize,
    /// `max |α_{i,j} − α_{i+1,j+1}|` over compared rows.
    pub weight_score: f64,
    /// Same statistic on pre-normalization scores.
    pub score_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub token: usize,
    pub n: usize,
    pub heads: Vec<ProbeHead>,
    pub capture: WeightCapture,
}

impl ProbeReport {
    pub fn weight_score(&self) -> f64 {
        self.heads.iter().map(|h| h.weight_score).fold(0.0, f64::max)
    }

    pub fn score_score(&self) -> f64 {
        self.heads.iter().map(|h| h.score_score).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "weight_invariance", "score_invariance"])?;
        for h in &self.heads {
            w.write_record(&[
                h.layer.to_string(),
                h.head.to_string(),
                h.weight_score.to_string(),
                h.score_score.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 0-based query rows `r` compared against `r + 1`: 1-based rows from
/// `min(2, n−1)` to `n−1`, so `n = 2` still yields the single pair.
fn probe_rows(n: usize) -> std::ops::Range<usize> {
    let first = if n > 2 { 1 } else { 0 };
    first..n - 1
}

fn invariance(n: usize, at: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for r in probe_rows(n) {
        for j in 0..=r {
            worst = worst.max((at(r, j) - at(r + 1, j + 1)).abs());
        }
    }
    worst
}

/// Feeds `n` copies of `token` and measures how far each head's weights
/// (and raw scores) are from depending on `i − j` alone.
pub fn probe_repeated<T: Scalar>(model: &Model<T>, token: usize, n: usize) -> Result<ProbeReport> {
    if n < 2 {
        bail!(Contract, "probe needs at least 2 positions, got {}", n);
    }
    let cfg = model.config;
    let mut tape = Tape::new();
    let opts = ForwardOptions { capture: true, trace: true, extrapolate: true };
    let out = model.forward(&mut tape, &[vec![token; n]], opts)?;
    let capture = out.capture.unwrap_or_default();
    let trace = out.trace.expect("trace requested");
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let positions: Vec<usize> = (0..n).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut report = Vec::new();
    for layer in 0..cfg.layers {
        let (mut q, mut k) = (tape.value(trace.q[layer]).clone(), tape.value(trace.k[layer]).clone());
        if let Some(rope) = cfg.attention().rope() {
            q = apply_rope(&q, &rope, &positions)?;
            k = apply_rope(&k, &rope, &positions)?;
        }
        for h in 0..heads {
            let hw = capture.heads.iter().find(|w| w.layer == layer && w.head == h).expect("captured head");
            let weight_score = invariance(n, |i, j| hw.get(i, j) as f64);
            let bias = |dist: usize| match (cfg.positional, &model.bias) {
                (PositionalMode::RopeBias, Some(b)) => b.lookup(layer, h, dist).f64(),
                (PositionalMode::Alibi, _) => alibi_bias(h, heads, dist),
                _ => 0.0,
            };
            let score = |i: usize, j: usize| {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                let kj = &k.row(j)[h * dh..(h + 1) * dh];
                qi.iter().zip(kj).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() * scale + bias(i - j)
            };
            let score_score = invariance(n, score);
            report.push(ProbeHead { layer, head: h, weight_score, score_score });
        }
    }
    Ok(ProbeReport { token, n, heads: report, capture })
}

// ------------------------------------------------ per-position statistics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionStats {
    pub layer: usize,
    /// 0-based position.
    pub position: usize,
    pub value_norm: f64,
    pub value_var: f64,
    pub hidden_norm: f64,
    pub hidden_var: f64,
}

/// L2 norm and population variance of a vector.
pub fn norm_and_var<T: Scalar>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    let norm = x.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
    (norm, var)
}

/// Value-vector and hidden-state statistics for the first
/// [`SINK_POSITIONS`] positions of `tokens`, per layer. The hidden state
/// is the residual stream leaving the layer; the value vector is the
/// concatenation over heads.
pub fn sink_variance_report<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<PositionStats>> {
    if tokens.is_empty() {
        bail!(Data, "empty input text");
    }
    let n = tokens.len().min(model.config.n_ctx);
    let mut tape = Tape::new();
    let out =
        model.forward(&mut tape, &[tokens[..n].to_vec()], ForwardOptions { trace: true, ..Default::default() })?;
    let trace = out.trace.expect("trace requested");
    let mut rows = Vec::new();
    for layer in 0..model.config.layers {
        let v: &Tensor<T> = tape.value(trace.v[layer]);
        let hid: &Tensor<T> = tape.value(trace.hidden[layer + 1]);
        for p in 0..n.min(SINK_POSITIONS) {
            let (value_norm, value_var) = norm_and_var(v.row(p));
            let (hidden_norm, hidden_var) = norm_and_var(hid.row(p));
            rows.push(PositionStats { layer, position: p, value_norm, value_var, hidden_norm, hidden_var });
        }
    }
    Ok(rows)
}

pub fn write_sink_csv<W: Write>(rows: &[PositionStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "position", "value_norm", "value_var", "hidden_norm", "hidden_var"])?;
    for r in rows {
        w.write_record(&[
            r.layer.to_string(),
            r.position.to_string(),
            r.value_norm.to_string(),
            r.value_var.to_string(),
            r.hidden_norm.to_string(),
            r.hidden_var.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// --------------------------------------------------------------- exports

pub fn export_bias<T: Scalar, W: Write>(model: &Model<T>, out: W) -> Result<()> {
    match &model.bias {
        Some(b) => b.write_csv(out),
        None => bail!(Contract, "model uses {} positions and has no distance-bias table", model.config.positional),
    }
}

pub fn export_offsets<T: Scalar, W: Write>(model: &Model<T>, out: W) -> Result<()> {
    match &model.tau {
        Some(t) => t.write_csv(out),
        None => bail!(Contract, "normalizer {} has no learnable offset", model.config.normalizer),
    }
}
