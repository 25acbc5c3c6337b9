//! Width growth: RMS-preserving fan-out / fan-in / RMSNorm operators, the
//! model-level orchestrator and the splitting / perturbation baselines.
//!
//! Copy growth appends cyclic duplicates after the original block: new
//! index `j` (with `j ≥ d`) copies index `j mod d`. Growth ratios below 2
//! therefore duplicate a prefix of channels once; larger ratios cycle, so
//! every channel has copy multiplicity within one of every other.

mod baseline;
mod model;
mod ops;
mod regions;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::StatePolicy;
use crate::schedule::RewarmPlan;

pub use baseline::{baseline_expand, Baseline};
pub use model::expand_model;
pub use ops::{expanded_len, fan_in_expand, fan_in_scale_factor, fan_out_expand, rmsnorm_expand};
pub use regions::{CopyPair, Origin, ParamRegions, RegionMap, RegionTag, Segment};

/// How freshly added weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitRegime {
    Copy,
    Random,
    Zero,
}

impl FromStr for InitRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "random" => Ok(Self::Random),
            "zero" => Ok(Self::Zero),
            _ => Err(Error::config(format!(
                "unknown init regime `{s}` (expected copy, random or zero)"
            ))),
        }
    }
}

impl fmt::Display for InitRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Random => "random",
            Self::Zero => "zero",
        })
    }
}

/// Regimes for a producer/consumer pair sharing the grown width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    /// Producer side (rows of the matrices writing the grown width).
    pub fan_out: InitRegime,
    /// Consumer side (columns of the matrices reading it).
    pub fan_in: InitRegime,
    /// Apply the fan-in RMS-preserving rescale.
    pub scale: bool,
}

impl PairSpec {
    pub const fn new(fan_out: InitRegime, fan_in: InitRegime, scale: bool) -> Self {
        Self {
            fan_out,
            fan_in,
            scale,
        }
    }

    pub const fn copy_scaled() -> Self {
        Self::new(InitRegime::Copy, InitRegime::Copy, true)
    }
}

/// Declarative description of one growth event.
///
/// `expert` pairs expert up/gate rows with down columns (inner axis).
/// `attention` pairs the output projection's rows with the q/k/v columns
/// (hidden axis). `hidden` covers the remaining hidden-stream producers
/// (embedding columns, expert down rows) and consumers (router, expert
/// up/gate columns, untied output head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    /// Expert inner ratio `d′_ffn / d_ffn`; `None` leaves the axis alone.
    pub inner_ratio: Option<f64>,
    /// Hidden ratio `d′_model / d_model`; `None` leaves the axis alone.
    pub hidden_ratio: Option<f64>,
    pub expert: PairSpec,
    pub attention: PairSpec,
    pub hidden: PairSpec,
    pub state_policy: StatePolicy,
    pub rewarm: Option<RewarmPlan>,
    /// Splitting / perturbation heuristic applied on top of an inner copy.
    pub baseline: Option<Baseline>,
    pub seed: u64,
}

impl Default for ExpansionPlan {
    fn default() -> Self {
        Self {
            inner_ratio: Some(2.0),
            hidden_ratio: None,
            expert: PairSpec::copy_scaled(),
            attention: PairSpec::copy_scaled(),
            hidden: PairSpec::copy_scaled(),
            state_policy: StatePolicy::AsymmetricReset,
            rewarm: Some(RewarmPlan::default()),
            baseline: None,
            seed: 0,
        }
    }
}

impl ExpansionPlan {
    pub fn inner(ratio: f64) -> Self {
        Self {
            inner_ratio: Some(ratio),
            ..Self::default()
        }
    }

    pub fn hidden(ratio: f64) -> Self {
        Self {
            inner_ratio: None,
            hidden_ratio: Some(ratio),
            ..Self::default()
        }
    }

    pub fn joint(inner: f64, hidden: f64) -> Self {
        Self {
            inner_ratio: Some(inner),
            hidden_ratio: Some(hidden),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, ratio) in [("inner", self.inner_ratio), ("hidden", self.hidden_ratio)] {
            if let Some(r) = ratio {
                if !(r.is_finite() && r >= 1.0) {
                    return Err(Error::config(format!(
                        "expansion.{axis}_ratio must be a finite number >= 1, got {r}"
                    )));
                }
            }
        }
        if self.inner_ratio.is_none() && self.hidden_ratio.is_none() {
            return Err(Error::config("expansion plan grows no axis"));
        }
        if let Some(rw) = &self.rewarm {
            rw.validate()?;
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
            if self.inner_ratio != Some(2.0)
                || self.hidden_ratio.is_some()
                || self.expert != PairSpec::copy_scaled()
            {
                return Err(Error::config(
                    "baselines apply to a 2x inner copy/copy scaled expansion only",
                ));
            }
        }
        Ok(())
    }
}
