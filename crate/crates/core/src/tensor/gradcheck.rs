use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max of |analytic − numeric| / max(|analytic|, |numeric|) over the
    /// coordinates where that denominator is at least [`REL_FLOOR`]
    pub max_rel_error: f64,
    /// max of |analytic − numeric| over the remaining coordinates
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Below this gradient magnitude errors are reported on an absolute scale.
/// Central differences carry about `1e-15 / step` of rounding noise, so a
/// gradient that is structurally zero (a bias feeding batch norm, say) has no
/// meaningful relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` maps a candidate value of `param` to `(loss, ∂loss/∂param)`. When
/// `coords` is given only those flat indices are perturbed.
pub fn finite_difference_check<F>(
    mut f: F,
    param: &Parameter<f64>,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheck>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let base = &param.value;
    let (first, analytic) = f(base)?;
    let (second, _) = f(base)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if analytic.shape() != base.shape() {
        return Err(Error::shape("finite_difference_check", base.shape(), analytic.shape()));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.numel()).collect();
            &all
        }
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = base.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let scale = a.abs().max(numeric.abs());
        let err = (a - numeric).abs();
        if scale < REL_FLOOR {
            report.max_abs_error = report.max_abs_error.max(err);
        } else if err / scale > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err / scale;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
