//! Central-finite-difference verification of analytic gradients. The
//! numeric side never touches the tape, so it stays an independent oracle
//! for everything the reverse pass computes.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst observed coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<(ParamId, usize)>,
    pub coords_checked: usize,
}

/// Relative error between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compare the analytic gradient of `f` (computed by the caller into the
/// store's accumulators) against central differences with step `h`.
///
/// `f` must evaluate the scalar objective from the store's current values
/// without mutating them. The store's `grad` accumulators must already
/// hold the analytic gradient for the same point. Checks only trainable
/// parameters.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut f: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        coords_checked: 0,
    };
    for id in ids {
        let n = store.get(id).value.numel();
        for i in 0..n {
            let orig = store.get(id).value.values()[i];
            store.get_mut(id).value.values_mut()[i] = orig + h;
            let plus = f(store)?;
            store.get_mut(id).value.values_mut()[i] = orig - h;
            let minus = f(store)?;
            store.get_mut(id).value.values_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_check" });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad.values()[i];
            let err = rel_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some((id, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamGroup;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        // f = x^2 at x = 3: analytic 6, central difference 6
        let mut store = ParamStore::new();
        let id = store.register("x", ParamGroup::Pra, Tensor::scalar(3.0));
        let eval = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let x = s.bind(&mut tape, id);
            let sq = tape.mul(x, x)?;
            tape.value(sq).item()
        };
        // analytic gradient
        let mut tape = Tape::new();
        let x = store.bind(&mut tape, id);
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        store.accumulate(&tape, &g);
        let report = finite_diff_check(&mut store, eval, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("x", ParamGroup::Pra, Tensor::scalar(2.0));
        store.get_mut(id).grad.values_mut()[0] = 1.0; // wrong: true grad is 4
        let eval = |s: &ParamStore| -> crate::error::Result<f64> {
            let v = s.get(id).value.values()[0];
            Ok(v * v)
        };
        let report = finite_diff_check(&mut store, eval, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
