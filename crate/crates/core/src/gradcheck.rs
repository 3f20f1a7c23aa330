//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward values, so it stays independent
//! of every backward rule it is used to verify.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Worst disagreement found while checking one parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    /// Entries skipped because `±eps` crossed a branch of a piecewise op.
    pub boundary: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn boundary(&self) -> usize {
        self.entries.iter().map(|e| e.boundary).sum()
    }
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is essentially zero are judged on absolute terms. The
/// floor sits above central-difference roundoff at `eps = 1e-5`, which
/// reaches ~1e-8 on losses of order 10-100.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the analytic gradient of the scalar returned by `loss` with
/// central differences at step `eps`, for up to `per_param` evenly spaced
/// entries of each parameter in `params`.
pub fn check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    per_param: usize,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let region = tape.branch_signature();
    tape.backward(out)?;
    tape.accumulate_param_grads(store);

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        Ok((tape.value(out).item(), tape.branch_signature()))
    };

    let mut report = GradCheckReport::default();
    for &id in params {
        let n = store.value(id).len();
        let stride = (n / per_param.max(1)).max(1);
        let analytic = store.grad(id).clone();
        let mut worst: f64 = 0.0;
        let (mut checked, mut boundary) = (0, 0);
        for i in (0..n).step_by(stride).take(per_param) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let (plus, sp) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let (minus, sm) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            if sp != region || sm != region {
                boundary += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
        report.entries.push(GradCheckEntry {
            param: store.param(id).name.clone(),
            checked,
            max_rel_error: worst,
            analytic_norm: analytic.norm(),
            boundary,
        });
    }
    Ok(report)
}
