//! Central finite-difference gradient checks at 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Norm-wise relative error per input:
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Checks `∂f/∂inputs` where `f` builds a scalar on a fresh tape from the
/// given inputs (all registered as parameters).
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.numel())).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for t in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[t].numel());
        for e in 0..inputs[t].numel() {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[e] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        numeric.push(g);
    }
    let rel_errors = analytic.iter().zip(&numeric).map(|(a, n)| rel_error(a, n)).collect();
    Ok(GradReport { rel_errors, analytic, numeric })
}
