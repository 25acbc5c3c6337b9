//! AdamW and Muon steppers with per-region learning rates, and the
//! optimizer-state policies applied when a model is expanded.
//!
//! Every parameter carries two step counters: one for its original region
//! and one for its new region. Bias correction of an element uses the
//! counter of the region containing it, so a reset new region starts its
//! bias correction afresh while the original region keeps its history.

mod adamw;
mod muon;
mod state_policy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, GradientSet, TensorMap};
use crate::numerics::NumArray;

pub use adamw::adamw_step;
pub use muon::{muon_step, newton_schulz};
pub use state_policy::expand_states;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Muon,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "muon" => Ok(Self::Muon),
            _ => Err(Error::config(format!("unknown optimizer `{s}` (expected adamw or muon)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdamW => "adamw",
            Self::Muon => "muon",
        })
    }
}

/// What happens to optimizer state when the model grows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatePolicy {
    /// Zero every moment and restart all step counters.
    DropAll,
    /// New regions copy the state of their donor indices.
    CopyStates,
    /// Keep original state, zero new regions and restart their counter.
    AsymmetricReset,
    /// As `AsymmetricReset`, and rescale original state by the weight
    /// factor (second moment by its square).
    AsymmetricResetScaled,
}

impl FromStr for StatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop_all" => Ok(Self::DropAll),
            "copy_states" => Ok(Self::CopyStates),
            "asymmetric_reset" => Ok(Self::AsymmetricReset),
            "asymmetric_reset_scaled" => Ok(Self::AsymmetricResetScaled),
            _ => Err(Error::config(format!(
                "unknown state policy `{s}` (expected drop_all, copy_states, asymmetric_reset or asymmetric_reset_scaled)"
            ))),
        }
    }
}

impl fmt::Display for StatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DropAll => "drop_all",
            Self::CopyStates => "copy_states",
            Self::AsymmetricReset => "asymmetric_reset",
            Self::AsymmetricResetScaled => "asymmetric_reset_scaled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Muon momentum `μ`.
    pub momentum: f64,
    pub ns_iterations: usize,
    /// `(a, b, c)` in `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
    pub ns_coefficients: [f64; 3],
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            momentum: 0.95,
            ns_iterations: 5,
            ns_coefficients: [1.5, -0.5, 0.0],
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.momentum) {
            return Err(Error::config("beta1, beta2 and momentum must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be finite and >= 0"));
        }
        if self.ns_coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("Newton-Schulz coefficients must be finite"));
        }
        Ok(())
    }
}

/// Learning rate for original and new regions at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrByRegion {
    pub original: f64,
    pub new: Option<f64>,
}

impl LrByRegion {
    pub fn uniform(lr: f64) -> Self {
        Self {
            original: lr,
            new: Some(lr),
        }
    }

    pub fn original_only(lr: f64) -> Self {
        Self {
            original: lr,
            new: None,
        }
    }
}

/// Optimizer moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Moments {
    Adam { m: NumArray, v: NumArray },
    Muon { b: NumArray },
}

impl Moments {
    pub fn arrays(&self) -> Vec<(&'static str, &NumArray)> {
        match self {
            Moments::Adam { m, v } => vec![("m", m), ("v", v)],
            Moments::Muon { b } => vec![("b", b)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub moments: Moments,
    /// Steps taken by the original region.
    pub step: u64,
    /// Steps taken by the new region.
    pub new_step: u64,
    /// Row-major mask of new elements; `None` when all original.
    pub new_mask: Option<Vec<bool>>,
}

/// Per-parameter optimizer state, keyed like the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    params: BTreeMap<String, ParamState>,
}

/// Matrices other than the embedding and output head are orthogonalized;
/// everything else uses AdamW.
pub fn uses_muon(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != names::EMBED && name != names::LM_HEAD
}

impl OptimizerState {
    /// Zero state for every parameter in `params`.
    pub fn new(kind: OptimizerKind, params: &TensorMap) -> Self {
        let params = params
            .iter()
            .map(|(name, p)| {
                let zeros = NumArray::zeros(p.shape());
                let moments = if kind == OptimizerKind::Muon && uses_muon(name, p.shape()) {
                    Moments::Muon { b: zeros }
                } else {
                    Moments::Adam {
                        m: zeros.clone(),
                        v: zeros,
                    }
                };
                (
                    name.clone(),
                    ParamState {
                        moments,
                        step: 0,
                        new_step: 0,
                        new_mask: None,
                    },
                )
            })
            .collect();
        Self { kind, params }
    }

    pub fn from_parts(kind: OptimizerKind, params: BTreeMap<String, ParamState>) -> Self {
        Self { kind, params }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn get(&self, name: &str) -> Result<&ParamState> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("no optimizer state for `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamState)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Updates `params` in place with one step of the configured optimizer.
    pub fn step(&mut self, params: &mut TensorMap, grads: &GradientSet, lr: LrByRegion, hyper: &Hyperparams) -> Result<()> {
        hyper.validate()?;
        self.check(params, grads, lr)?;
        for (name, ps) in self.params.iter_mut() {
            let p = params.get_mut(name)?;
            let g = grads.get(name)?;
            match &mut ps.moments {
                Moments::Adam { m, v } => adamw::update(p, g, m, v, ps.step + 1, ps.new_step + 1, ps.new_mask.as_deref(), lr, hyper),
                Moments::Muon { b } => muon::update(p, g, b, ps.new_mask.as_deref(), lr, hyper)?,
            }
            ps.step += 1;
            ps.new_step += 1;
        }
        Ok(())
    }

    fn check(&self, params: &TensorMap, grads: &GradientSet, lr: LrByRegion) -> Result<()> {
        if self.params.len() != params.len() || grads.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters; model has {}, gradients {}",
                self.params.len(),
                params.len(),
                grads.len()
            )));
        }
        for (name, ps) in &self.params {
            let shape = params.get(name)?.shape();
            if grads.get(name)?.shape() != shape || ps.moments.arrays().iter().any(|(_, a)| a.shape() != shape) {
                return Err(Error::shape(format!("state/gradient shape mismatch for `{name}`")));
            }
            if ps.new_mask.is_some() && lr.new.is_none() {
                return Err(Error::config(format!(
                    "`{name}` has a new region but no learning rate was given for it"
                )));
            }
        }
        Ok(())
    }
}

/// Rate of element `i`.
#[inline]
pub(crate) fn element_lr(mask: Option<&[bool]>, i: usize, lr: LrByRegion) -> f64 {
    match mask {
        Some(m) if m[i] => lr.new.unwrap_or(lr.original),
        _ => lr.original,
    }
}
