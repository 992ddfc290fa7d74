//! Exclusivity-threshold annealing schedules.
//!
//! The exclusive losses take a per-step threshold `theta_t`. Starting it
//! near zero excludes all assumed background, so early training fits the
//! trusted foreground only; ramping it up re-admits background pixels the
//! scorer is not yet confident about. `threshold_at` is pure: callers ask
//! for the threshold at a global step, nothing is stored between calls.

use crate::error::{Error, Result};
use crate::losses::raw_sigmoid;
use serde::{Deserialize, Serialize};

pub const DEFAULT_STEEPNESS: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant `rho_max` from the first step.
    Fixed,
    /// Linear ramp from 0 at step 0 to `rho_max` at `total_steps`.
    Linear,
    /// Logistic ramp `rho_max * sigmoid(k * s - k/2)` over progress
    /// `s = step / total_steps`: flat near 0, a mid-training sweep, then
    /// saturation just below `rho_max`.
    Sigmoid,
    /// Applies the logistic to the ramp value itself:
    /// `sigmoid(rho_max * s)`. Starts at 0.5 and ends at
    /// `sigmoid(rho_max)`. A deliberately different reading of "sigmoid
    /// annealing", kept selectable because the two are not equivalent and
    /// the gap between them is worth measuring.
    LiteralSigmoid,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Fixed => "fixed",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sigmoid => "sigmoid",
            ScheduleKind::LiteralSigmoid => "literal_sigmoid",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ScheduleKind::Fixed),
            "linear" => Ok(ScheduleKind::Linear),
            "sigmoid" => Ok(ScheduleKind::Sigmoid),
            "literal_sigmoid" | "literal-sigmoid" => Ok(ScheduleKind::LiteralSigmoid),
            other => Err(Error::InvalidConfig(format!("unknown schedule kind {other:?}"))),
        }
    }
}

fn default_steepness() -> f64 {
    DEFAULT_STEEPNESS
}

fn default_total_steps() -> u64 {
    1
}

/// A complete threshold schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Threshold ceiling, in `(0, 1]`.
    pub rho_max: f64,
    /// Logistic steepness `k`; only the `Sigmoid` kind reads it.
    #[serde(default = "default_steepness")]
    pub steepness: f64,
    /// Step count the ramp is stretched over; thresholds are defined for
    /// steps `0..=total_steps`.
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn fixed(rho_max: f64) -> Self {
        Self { kind: ScheduleKind::Fixed, rho_max, steepness: DEFAULT_STEEPNESS, total_steps: 1 }
    }

    pub fn linear(rho_max: f64, total_steps: u64) -> Self {
        Self { kind: ScheduleKind::Linear, rho_max, steepness: DEFAULT_STEEPNESS, total_steps }
    }

    pub fn sigmoid(rho_max: f64, total_steps: u64) -> Self {
        Self { kind: ScheduleKind::Sigmoid, rho_max, steepness: DEFAULT_STEEPNESS, total_steps }
    }

    pub fn literal_sigmoid(rho_max: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::LiteralSigmoid,
            rho_max,
            steepness: DEFAULT_STEEPNESS,
            total_steps,
        }
    }

    pub fn with_steepness(mut self, steepness: f64) -> Self {
        self.steepness = steepness;
        self
    }

    pub fn with_total_steps(mut self, total_steps: u64) -> Self {
        self.total_steps = total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_max.is_finite() && self.rho_max > 0.0 && self.rho_max <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho_max must lie in (0, 1], got {}",
                self.rho_max
            )));
        }
        if !(self.steepness.is_finite() && self.steepness > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "steepness must be positive, got {}",
                self.steepness
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Threshold for the given global step, clamped to `[0, 1]`.
///
/// Steps beyond `total_steps` are a contract violation, not a saturation
/// request, so they error rather than clamp.
pub fn threshold_at(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::Range(format!(
            "step {} beyond schedule end {}",
            step, spec.total_steps
        )));
    }
    let s = step as f64 / spec.total_steps as f64;
    let theta = match spec.kind {
        ScheduleKind::Fixed => spec.rho_max,
        ScheduleKind::Linear => spec.rho_max * s,
        ScheduleKind::Sigmoid => {
            let k = spec.steepness;
            spec.rho_max * raw_sigmoid(k * s - k / 2.0)
        }
        ScheduleKind::LiteralSigmoid => raw_sigmoid(spec.rho_max * s),
    };
    Ok(theta.clamp(0.0, 1.0))
}
