use std::collections::BTreeMap;

use serde::Serialize;

use super::{GradBuffer, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute, so rounding noise on near-zero entries does not
/// register as a mismatch.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub checked_entries: usize,
    pub skipped_entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Compare analytic gradients against central differences of `loss`.
///
/// Every entry of every parameter with `requires_grad` is perturbed by
/// `±step`. Frozen parameters are absent from the report; entries where
/// both the analytic and numeric gradient are exactly zero are skipped.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    analytic: &GradBuffer,
    loss: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let mut probe = store.clone();
    let mut per_parameter_errors = BTreeMap::new();
    let mut worst: Option<(String, f64)> = None;
    let (mut checked, mut skipped) = (0, 0);

    for id in 0..store.len() {
        let param = store.get(id);
        if !param.requires_grad {
            continue;
        }
        let zeros = vec![0.0; param.value.numel()];
        let grad = analytic.get(id).unwrap_or(&zeros);
        let mut param_err: f64 = 0.0;
        for i in 0..param.value.numel() {
            let original = param.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = original + step;
            let up = loss(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original - step;
            let down = loss(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * step);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`[{i}]",
                    param.name
                )));
            }
            if a == 0.0 && numeric == 0.0 {
                skipped += 1;
                continue;
            }
            checked += 1;
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            param_err = param_err.max((a - numeric).abs() / denom);
        }
        if worst.as_ref().map_or(true, |(_, e)| param_err > *e) {
            worst = Some((param.name.clone(), param_err));
        }
        per_parameter_errors.insert(param.name.clone(), param_err);
    }

    let max_relative_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        worst_parameter: worst.map(|(n, _)| n),
        per_parameter_errors,
        checked_entries: checked,
        skipped_entries: skipped,
    })
}
