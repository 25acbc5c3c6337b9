//! Central-difference gradient verification.

use serde::Serialize;

use super::{forward, forward_backward, Batch, GradientSet, Model};
use crate::error::{Error, Result};
use crate::numerics::Precision;

/// Magnitude floor in the relative-error denominator, so that gradients
/// which are zero up to rounding do not produce huge ratios.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the model's own backward pass against central differences.
pub fn gradcheck(model: &Model, batch: &Batch, h: f64, tol: f64) -> Result<GradcheckReport> {
    let (_, grads, _) = forward_backward(model, batch)?;
    compare_gradients(model, batch, &grads, h, tol)
}

/// Compares arbitrary `analytic` gradients against central differences of
/// the model loss, element by element.
pub fn compare_gradients(
    model: &Model,
    batch: &Batch,
    analytic: &GradientSet,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    if model
        .params()
        .iter()
        .any(|(_, p)| p.precision() != Precision::Double)
    {
        return Err(Error::Parameter("gradcheck requires double precision".into()));
    }
    let mut probe = model.clone();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let grad = analytic.get(&name)?;
        let len = probe.param(&name)?.len();
        if grad.len() != len {
            return Err(Error::shape(format!("gradient `{name}` has wrong size")));
        }
        let mut worst = (0.0, 0);
        for i in 0..len {
            let orig = probe.param(&name)?.data()[i];
            probe.params_mut().get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = forward(&probe, batch)?.loss;
            probe.params_mut().get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = forward(&probe, batch)?.loss;
            probe.params_mut().get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        params.push(ParamError {
            name,
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradcheckReport {
        step: h,
        tolerance: tol,
        params,
    })
}
