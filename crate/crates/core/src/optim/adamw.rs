//! Decoupled-weight-decay Adam.

use super::{element_lr, Hyperparams, LrByRegion, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{GradientSet, TensorMap};
use crate::numerics::NumArray;

/// One AdamW step over every parameter.
pub fn adamw_step(
    params: &mut TensorMap,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: LrByRegion,
    hyper: &Hyperparams,
) -> Result<()> {
    if state.kind() != OptimizerKind::AdamW {
        return Err(Error::config("adamw_step called with Muon state"));
    }
    state.step(params, grads, lr, hyper)
}

/// `p ← p·(1 − lr·wd) − lr·m̂/(sqrt(v̂) + ε)`; `step`/`new_step` are the
/// post-increment counters used for bias correction.
#[allow(clippy::too_many_arguments)]
pub(crate) fn update(
    p: &mut NumArray,
    g: &NumArray,
    m: &mut NumArray,
    v: &mut NumArray,
    step: u64,
    new_step: u64,
    mask: Option<&[bool]>,
    lr: LrByRegion,
    h: &Hyperparams,
) {
    let bias = |t: u64| (1.0 - h.beta1.powi(t as i32), 1.0 - h.beta2.powi(t as i32));
    let (bc1_o, bc2_o) = bias(step);
    let (bc1_n, bc2_n) = bias(new_step);
    let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let gi = gd[i];
        md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
        vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
        let is_new = mask.is_some_and(|m| m[i]);
        let (bc1, bc2) = if is_new { (bc1_n, bc2_n) } else { (bc1_o, bc2_o) };
        let rate = element_lr(mask, i, lr);
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] = pd[i] * (1.0 - rate * h.weight_decay) - rate * mhat / (vhat.sqrt() + h.eps);
    }
}
