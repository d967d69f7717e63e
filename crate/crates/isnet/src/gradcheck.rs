//! Central finite-difference verification of tape gradients.
//!
//! The checker is intentionally dumb: it re-runs the full forward pass twice
//! per perturbed component and never looks at the analytic path it verifies.

use crate::error::{IsnetError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over components of |analytic - central difference| /
    /// max(|analytic|, |cd|, 1e-12)
    pub max_rel_err: f64,
    /// smallest |relu pre-activation| seen at the probe point, if any relu
    /// was recorded; kinks closer than ~10 eps make finite differences lie
    pub min_relu_margin: Option<f64>,
    pub components: usize,
}

/// Checks a scalar-valued tape program against central finite differences.
///
/// `build` receives a fresh tape and one leaf per entry of `inputs` (in
/// order) and must return the scalar loss. Runs in f64.
pub fn grad_check<B>(build: B, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(IsnetError::usage("grad_check requires a scalar-valued function"));
    }
    tape.backward(loss)?;
    let min_relu_margin = tape.min_relu_margin();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let loss_at = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).scalar_value()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut components = 0usize;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = loss_at(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = loss_at(&probe)?;
            probe[i].data_mut()[j] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            components += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        min_relu_margin,
        components,
    })
}
