//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::matrix::Matrix;
use super::tape::{ParamStore, Tape, Var};
use crate::error::{DrlError, Result};

/// Floor on the relative-error denominator.
pub const REL_DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_DENOM_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`, entry by entry, for every parameter in `params`.
///
/// `f` records a scalar loss on the supplied tape, reading parameters from
/// the supplied store.
pub fn gradient_check<F>(f: F, params: &ParamStore, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(DrlError::Precondition(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let base = tape.scalar(root);
    if !base.is_finite() {
        return Err(DrlError::NonFinite("gradient_check objective at base point".into()));
    }
    let grads = tape.backward(root);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, store)?;
        let out = t.scalar(v);
        if out.is_finite() {
            Ok(out)
        } else {
            Err(DrlError::NonFinite("gradient_check objective at probe point".into()))
        }
    };

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let analytic: Matrix = grads.get_or_zeros(id, params);
        let mut worst = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..analytic.as_slice().len() {
            let orig = params.get(id).as_slice()[k];
            probe.get_mut(id).as_mut_slice()[k] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[k] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[k];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_entry = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        report.push(worst);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
        step,
    })
}
