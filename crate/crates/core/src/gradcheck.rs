//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the backward rules it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub failures: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error with an absolute floor: an entry passes when
/// `|a - n| <= abs_floor` or `|a - n| / max(|a|, |n|) < rel_tol`.
pub fn entry_ok(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff / analytic.abs().max(numeric.abs()) < rel_tol
}

/// Compares backward gradients of a scalar function of `inputs` against
/// central differences with step `eps`.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, eps: f64, rel_tol: f64, abs_floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        failures: 0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let diff = (grads[k] - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(diff);
            let scale = grads[k].abs().max(numeric.abs());
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
            }
            if !entry_ok(grads[k], numeric, rel_tol, abs_floor) {
                report.failures += 1;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces a non-scalar output to a scalar by a fixed weighted sum so that
/// every output entry contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}
