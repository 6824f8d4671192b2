//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(1, |central|)` over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was reached.
    pub worst_index: usize,
    /// Set when the loss was non-finite at some probe point; the check has
    /// failed and `max_rel_error` is infinite.
    pub non_finite_at: Option<usize>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite_at.is_none() && self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of the scalar `f(point)` against central
/// differences with the given `step` (which must lie in `[1e-7, 1e-3]`).
///
/// `f` receives a fresh tape and the input recorded on it. Failures to
/// evaluate `f` at a probe point (for instance a non-finite value) are
/// reported in the result, not returned as errors.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Param(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        match f(&tape, x).and_then(|y| y.backward().map(|g| g.wrt(x))) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => {
                return Ok(GradCheckReport {
                    max_rel_error: f64::INFINITY,
                    worst_index: 0,
                    non_finite_at: Some(0),
                })
            }
            Err(e) => return Err(e),
        }
    };

    let eval = |data: Vec<f64>| -> Option<f64> {
        let probe = Tensor::new(point.shape(), data).ok()?;
        let tape = Tape::new();
        let x = tape.leaf(probe);
        let y = f(&tape, x).ok()?;
        let v = y.value().item();
        v.is_finite().then_some(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        non_finite_at: None,
    };
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let (Some(fp), Some(fm)) = (eval(plus), eval(minus)) else {
            report.max_rel_error = f64::INFINITY;
            report.worst_index = i;
            report.non_finite_at = Some(i);
            return Ok(report);
        };
        let central = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
