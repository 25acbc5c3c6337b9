//! Symmetry-breaking heuristics applied on top of a 2x inner copy.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{expand_model, ExpansionPlan, RegionMap};
use crate::error::{Error, Result};
use crate::model::{names, Model, ModelConfig, TensorMap};
use crate::numerics::{sample_gaussian, Rng};

/// Function-preserving alternatives to asymmetric optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// Each duplicated down column pair is split `r : 1−r`.
    UnevenFixed { r: f64 },
    /// Per-channel `r ~ U[low, high]`.
    UnevenRandom { low: f64, high: f64 },
    /// `±E` added to the original / copied up rows, `E ~ N(0, std²)`.
    Perturb { std: f64 },
}

impl Baseline {
    pub const UNEVEN_FIXED: Baseline = Baseline::UnevenFixed { r: 1.0 / 3.0 };
    pub const UNEVEN_RANDOM: Baseline = Baseline::UnevenRandom { low: 0.1, high: 0.5 };

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        match *self {
            Baseline::UnevenFixed { r } if !open_unit(r) => {
                Err(Error::config(format!("split ratio must lie in (0, 1), got {r}")))
            }
            Baseline::UnevenRandom { low, high } if !(open_unit(low) && open_unit(high) && low <= high) => {
                Err(Error::config(format!(
                    "split range [{low}, {high}] must lie inside (0, 1)"
                )))
            }
            Baseline::Perturb { std } if !(std.is_finite() && std >= 0.0) => {
                Err(Error::config(format!("perturbation std must be >= 0, got {std}")))
            }
            _ => Ok(()),
        }
    }

    /// Config spelling; `perturb` carries its std in a separate key.
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::UnevenFixed { .. } => "uneven_fixed",
            Baseline::UnevenRandom { .. } => "uneven_random",
            Baseline::Perturb { .. } => "perturb",
        }
    }

    pub fn from_name(name: &str, perturb_std: f64) -> Result<Self> {
        match name {
            "uneven_fixed" => Ok(Self::UNEVEN_FIXED),
            "uneven_random" => Ok(Self::UNEVEN_RANDOM),
            "perturb" => Ok(Baseline::Perturb { std: perturb_std }),
            _ => Err(Error::config(format!(
                "unknown baseline `{name}` (expected uneven_fixed, uneven_random or perturb)"
            ))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 2x inner copy/copy scaled expansion followed by `strategy`.
pub fn baseline_expand(model: &Model, strategy: Baseline, seed: u64) -> Result<(Model, RegionMap)> {
    let plan = ExpansionPlan {
        baseline: Some(strategy),
        seed,
        ..ExpansionPlan::inner(2.0)
    };
    expand_model(model, &plan)
}

/// Rewrites the freshly copied expert blocks in `params` (already at the
/// grown width `cfg.d_ffn`).
pub(crate) fn apply(strategy: Baseline, params: &mut TensorMap, cfg: &ModelConfig, seed: u64) -> Result<()> {
    strategy.validate()?;
    let f = cfg.d_ffn / 2;
    for l in 0..cfg.layers {
        for e in 0..cfg.experts {
            match strategy {
                Baseline::UnevenFixed { .. } | Baseline::UnevenRandom { .. } => {
                    let name = names::expert(l, e, "down");
                    let mut rng = Rng::derived(seed, &format!("split/{name}"));
                    let ratios: Vec<f64> = (0..f)
                        .map(|_| match strategy {
                            Baseline::UnevenRandom { low, high } => low + (high - low) * rng.uniform(),
                            Baseline::UnevenFixed { r } => r,
                            Baseline::Perturb { .. } => unreachable!(),
                        })
                        .collect();
                    let down = params.get_mut(&name)?;
                    let cols = 2 * f;
                    // Each column currently carries half of the original; the
                    // pair becomes r and 1−r of it.
                    for row in down.data_mut().chunks_mut(cols) {
                        for (j, &r) in ratios.iter().enumerate() {
                            row[j] *= 2.0 * r;
                            row[f + j] *= 2.0 * (1.0 - r);
                        }
                    }
                }
                Baseline::Perturb { std } => {
                    let name = names::expert(l, e, "up");
                    let mut rng = Rng::derived(seed, &format!("perturb/{name}"));
                    let d = cfg.d_model;
                    let noise = sample_gaussian(&mut rng, &[f, d], 0.0, std)?;
                    let up = params.get_mut(&name)?.data_mut();
                    for (i, &eps) in noise.data().iter().enumerate() {
                        up[i] += eps;
                        up[f * d + i] -= eps;
                    }
                }
            }
        }
    }
    Ok(())
}
