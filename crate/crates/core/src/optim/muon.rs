//! Momentum followed by Newton–Schulz orthogonalization.

use super::{element_lr, Hyperparams, LrByRegion, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{GradientSet, TensorMap};
use crate::numerics::{kernels, NumArray};

/// One Muon step; non-matrix parameters and the embedding/head use AdamW.
pub fn muon_step(
    params: &mut TensorMap,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: LrByRegion,
    hyper: &Hyperparams,
) -> Result<()> {
    if state.kind() != OptimizerKind::Muon {
        return Err(Error::config("muon_step called with AdamW state"));
    }
    state.step(params, grads, lr, hyper)
}

/// Polynomial iteration `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`, which equals
/// `X·φ(XᵀX)` with `φ(G) = aI + bG + cG²`.
///
/// The input is expected to be pre-normalized (spectral norm ≤ 1); no
/// normalization happens here. Each output column depends only on the
/// same input column and on `XXᵀ`, and duplicated rows give duplicated
/// rows of `XXᵀ`, so duplicated row or column blocks stay bitwise equal.
pub fn newton_schulz(x: &NumArray, iterations: usize, coefficients: [f64; 3]) -> Result<NumArray> {
    let (m, n) = x.dims2()?;
    let [a, b, c] = coefficients;
    let mut cur = x.data().to_vec();
    for _ in 0..iterations {
        let xt = kernels::transpose(&cur, m, n);
        let mut gram = vec![0.0; m * m];
        kernels::gemm(&cur, &xt, &mut gram, m, n, m);
        let mut poly: Vec<f64> = gram.iter().map(|g| b * g).collect();
        if c != 0.0 {
            let mut sq = vec![0.0; m * m];
            kernels::gemm(&gram, &gram, &mut sq, m, m, m);
            poly.iter_mut().zip(&sq).for_each(|(p, s)| *p += c * s);
        }
        let mut next: Vec<f64> = cur.iter().map(|v| a * v).collect();
        kernels::gemm(&poly, &cur, &mut next, m, m, n);
        cur = next;
    }
    NumArray::from_vec(&[m, n], cur)
}

pub(crate) fn update(
    p: &mut NumArray,
    g: &NumArray,
    b: &mut NumArray,
    mask: Option<&[bool]>,
    lr: LrByRegion,
    h: &Hyperparams,
) -> Result<()> {
    let (rows, cols) = p.dims2()?;
    for (bv, gv) in b.data_mut().iter_mut().zip(g.data()) {
        *bv = h.momentum * *bv + gv;
    }
    // Work on the wide orientation so the Gram matrix is the small one.
    let tall = rows > cols;
    let mut x = if tall { b.transpose()? } else { b.clone() };
    let norm = x.frobenius();
    if norm > 0.0 {
        x = x.scale(1.0 / norm);
    }
    let mut o = newton_schulz(&x, h.ns_iterations, h.ns_coefficients)?;
    if tall {
        o = o.transpose()?;
    }
    // Orthogonal updates have entry RMS 1/sqrt(max(rows, cols)); this
    // factor brings them to unit RMS.
    let shape_factor = (rows.max(cols) as f64).sqrt();
    let pd = p.data_mut();
    for (i, (pv, ov)) in pd.iter_mut().zip(o.data()).enumerate() {
        let rate = element_lr(mask, i, lr);
        *pv = *pv * (1.0 - rate * h.weight_decay) - rate * shape_factor * ov;
    }
    Ok(())
}
