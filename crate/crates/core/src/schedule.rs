//! Learning-rate schedules: linear warmup into cosine decay, and the
//! re-warmup curve for regions added by an expansion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::RegionTag;

/// Linear warmup `η₀ → η_max` over `warmup_steps`, then cosine decay to
/// `η_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub initial_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
}

impl CosineWarmup {
    pub fn new(warmup_steps: usize, total_steps: usize, initial_lr: f64, peak_lr: f64, final_lr: f64) -> Result<Self> {
        let s = Self {
            warmup_steps,
            total_steps,
            initial_lr,
            peak_lr,
            final_lr,
        };
        s.validate()?;
        Ok(s)
    }

    /// Warmup over 3% of the steps from zero, decaying to 1% of the peak.
    pub fn with_defaults(total_steps: usize, peak_lr: f64) -> Result<Self> {
        let warmup = (0.03 * total_steps as f64).round() as usize;
        Self::new(warmup, total_steps, 0.0, peak_lr, 0.01 * peak_lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup steps ({}) exceed total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        let rates = [self.initial_lr, self.peak_lr, self.final_lr];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("learning rates must be finite and >= 0"));
        }
        if self.final_lr > self.peak_lr || self.initial_lr > self.peak_lr {
            return Err(Error::config("initial and final rates must not exceed the peak"));
        }
        Ok(())
    }

    /// Rate at step `t ∈ [0, T]`.
    pub fn lr_at(&self, t: f64) -> Result<f64> {
        let total = self.total_steps as f64;
        if !(0.0..=total).contains(&t) {
            return Err(Error::Domain(format!("step {t} outside [0, {total}]")));
        }
        Ok(warmup_cosine(
            t,
            self.warmup_steps as f64,
            total,
            self.initial_lr,
            self.peak_lr,
            self.final_lr,
        ))
    }
}

/// `f(τ; T_w, T, η₀, η_max, η_min)` with cosine weight `½(1 + cos πx)`.
fn warmup_cosine(tau: f64, warmup: f64, total: f64, start: f64, peak: f64, end: f64) -> f64 {
    if tau < warmup {
        return start + (peak - start) * tau / warmup;
    }
    let progress = if total > warmup {
        ((tau - warmup) / (total - warmup)).min(1.0)
    } else {
        1.0
    };
    end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Which parameters follow the re-warmup curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewarmScope {
    /// Only regions added by the expansion.
    New,
    /// Every parameter.
    All,
}

impl FromStr for RewarmScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new" => Ok(Self::New),
            "all" => Ok(Self::All),
            _ => Err(Error::config(format!("unknown rewarm scope `{s}` (expected new or all)"))),
        }
    }
}

impl fmt::Display for RewarmScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::New => "new",
            Self::All => "all",
        })
    }
}

/// Re-warmup settings carried by an expansion plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewarmPlan {
    /// Warmup length `τ_w` in optimizer steps.
    pub steps: usize,
    /// New peak as a multiple `ρ` of the rate at the expansion step.
    pub ratio: f64,
    pub scope: RewarmScope,
}

impl Default for RewarmPlan {
    fn default() -> Self {
        Self {
            steps: 250,
            ratio: 1.3,
            scope: RewarmScope::New,
        }
    }
}

impl RewarmPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return Err(Error::config(format!("rewarm ratio must be > 0, got {}", self.ratio)));
        }
        Ok(())
    }

    pub fn at(&self, expansion_step: usize) -> RewarmSpec {
        RewarmSpec {
            expansion_step,
            steps: self.steps,
            ratio: self.ratio,
        }
    }
}

/// Re-warmup anchored at expansion step `t_e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewarmSpec {
    pub expansion_step: usize,
    pub steps: usize,
    pub ratio: f64,
}

/// Rate for new regions at `t > t_e`: warmup from `η_e = lr_at(t_e)` to
/// `ρ·η_e` over `τ_w` steps, then cosine decay to the shared `η_min` at `T`.
pub fn rewarm_lr_at(base: &CosineWarmup, rw: &RewarmSpec, t: f64) -> Result<f64> {
    let te = rw.expansion_step as f64;
    let total = base.total_steps as f64;
    if !(t > te && t <= total) {
        return Err(Error::Domain(format!(
            "rewarm rate defined on ({te}, {total}], got {t}"
        )));
    }
    let eta_e = base.lr_at(te)?;
    Ok(warmup_cosine(
        t - te,
        rw.steps as f64,
        total - te,
        eta_e,
        rw.ratio * eta_e,
        base.final_lr,
    ))
}

/// Rate for a region: original regions always follow the base schedule;
/// new regions switch to the re-warmup curve after the expansion step.
pub fn region_lr(base: &CosineWarmup, rw: Option<&RewarmSpec>, tag: RegionTag, t: f64) -> Result<f64> {
    match (tag, rw) {
        (RegionTag::New, Some(rw)) if t > rw.expansion_step as f64 => rewarm_lr_at(base, rw, t),
        _ => base.lr_at(t),
    }
}
