//! Carrying optimizer state across an expansion.

use super::{Moments, OptimizerState, ParamState, StatePolicy};
use crate::error::{Error, Result};
use crate::expansion::{ParamRegions, RegionMap};
use crate::numerics::NumArray;

/// Grows `state` to the shapes recorded in `region_map` under `policy`.
///
/// For the scaled policy the factor is the one the expansion applied to
/// each parameter's weights (`ParamRegions::scale`).
pub fn expand_states(state: &OptimizerState, region_map: &RegionMap, policy: StatePolicy) -> Result<OptimizerState> {
    if region_map.len() != state.len() {
        return Err(Error::config(format!(
            "region map covers {} parameters, optimizer state {}",
            region_map.len(),
            state.len()
        )));
    }
    let mut out = std::collections::BTreeMap::new();
    for (name, ps) in state.iter() {
        let regions = region_map.get(name)?;
        let mask = regions.new_mask();
        let factor = match policy {
            StatePolicy::AsymmetricResetScaled => regions.scale,
            _ => 1.0,
        };
        let keep_new = policy == StatePolicy::CopyStates;
        let grow = |a: &NumArray, f: f64| -> Result<NumArray> {
            if policy == StatePolicy::DropAll {
                return Ok(NumArray::zeros(&regions.shape));
            }
            regrow(name, a, regions, mask.as_deref(), f, keep_new)
        };
        let moments = match &ps.moments {
            Moments::Adam { m, v } => Moments::Adam {
                m: grow(m, factor)?,
                v: grow(v, factor * factor)?,
            },
            Moments::Muon { b } => Moments::Muon { b: grow(b, factor)? },
        };
        let (step, new_step) = match policy {
            StatePolicy::DropAll => (0, 0),
            StatePolicy::CopyStates => (ps.step, ps.step),
            StatePolicy::AsymmetricReset | StatePolicy::AsymmetricResetScaled => {
                (ps.step, if mask.is_some() { 0 } else { ps.step })
            }
        };
        out.insert(
            name.clone(),
            ParamState {
                moments,
                step,
                new_step,
                new_mask: mask,
            },
        );
    }
    Ok(OptimizerState::from_parts(state.kind(), out))
}

/// Original elements are multiplied by `factor`; new elements copy their
/// donor when `keep_new`, else start at zero.
fn regrow(
    name: &str,
    a: &NumArray,
    regions: &ParamRegions,
    mask: Option<&[bool]>,
    factor: f64,
    keep_new: bool,
) -> Result<NumArray> {
    let old_shape = regions.original_shape();
    if a.shape() != old_shape.as_slice() {
        return Err(Error::shape(format!(
            "state for `{name}` has shape {:?}, region map expects {old_shape:?}",
            a.shape()
        )));
    }
    let src = a.data();
    let data: Vec<f64> = match regions.shape.len() {
        1 => regions
            .source_indices(0)
            .into_iter()
            .enumerate()
            .map(|(i, s)| pick(src[s], mask.is_some_and(|m| m[i]), factor, keep_new))
            .collect(),
        2 => {
            let rows = regions.source_indices(0);
            let cols = regions.source_indices(1);
            let old_cols = old_shape[1];
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for &r in &rows {
                for &c in &cols {
                    let i = data.len();
                    data.push(pick(src[r * old_cols + c], mask.is_some_and(|m| m[i]), factor, keep_new));
                }
            }
            data
        }
        n => return Err(Error::shape(format!("cannot regrow {n}-D state"))),
    };
    Ok(NumArray::from_vec(&regions.shape, data)?.to_precision(a.precision()))
}

fn pick(value: f64, is_new: bool, factor: f64, keep_new: bool) -> f64 {
    match (is_new, keep_new) {
        (false, _) => value * factor,
        (true, true) => value,
        (true, false) => 0.0,
    }
}
