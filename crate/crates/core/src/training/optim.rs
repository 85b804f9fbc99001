//! AdamW with decoupled weight decay, global-norm clipping and a warmup +
//! cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::model::{Model, ParamKind};
use crate::numeric::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr_fraction: f64,
}

impl Schedule {
    /// Linear warmup from 0 to the peak over `warmup_steps`, then cosine
    /// decay to `min_lr_fraction · peak` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let floor = self.peak_lr * self.min_lr_fraction;
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak_lr;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment buffers aligned with the model's declared parameter order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(model: &Model<T>, config: AdamWConfig) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, _, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Self { config, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` belongs to the i-th declared parameter; frozen
    /// parameters are skipped whatever their gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |_, kind, p| {
            let i = idx;
            idx += 1;
            if kind == ParamKind::Frozen {
                return;
            }
            let decay = if kind == ParamKind::Decay { c.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut ms[i], &mut vs[i], &grads[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k].f64();
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                let xv = x.f64();
                *x = T::of(xv - lr * (update + decay * xv));
            }
        });
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
