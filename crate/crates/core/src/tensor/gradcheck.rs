//! Central finite-difference checks of graph gradients.
//!
//! Checks run in `f64`. The function under test is rebuilt on a fresh graph
//! for every perturbation, so it must be a pure function of its inputs.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Relative step: each element moves by `step * max(1, |x|)`.
    pub step: f64,
    /// Largest accepted `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub tolerance: f64,
    /// Elements whose analytic gradient is at most this are skipped.
    pub min_magnitude: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-3,
            min_magnitude: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    /// Elements compared (those above the magnitude floor).
    pub checked: usize,
    pub worst_relative_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape()));
    }
    Ok(v.item())
}

/// Compares the gradient of the scalar `build(inputs)` with respect to every
/// input element against central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, cfg: GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (input, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.data().iter().enumerate() {
            if a.abs() <= cfg.min_magnitude {
                continue;
            }
            let x = inputs[input].data()[index];
            let h = cfg.step * x.abs().max(1.0);
            probe[input].data_mut()[index] = x + h;
            let up = evaluate(&probe, &build)?;
            probe[input].data_mut()[index] = x - h;
            let down = evaluate(&probe, &build)?;
            probe[input].data_mut()[index] = x;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            report.worst_relative_error = report.worst_relative_error.max(rel);
            if !(rel < cfg.tolerance) {
                report.mismatches.push(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// `sum(weights * v)`: reduces a tensor output to a scalar without the
/// cancellations a plain sum can hide.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}
