//! Stretched Hard Concrete gates: reparametrized sampling, probability of a
//! non-zero gate, and the expected L0 norm of a set of gates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("stretch limits must satisfy lo < 0 < 1 < hi (got lo={lo}, hi={hi})")]
    BadStretch { lo: f64, hi: f64 },
    #[error("temperature must be positive (got {0})")]
    BadTemperature(f64),
}

/// Stretch interval `(lo, hi)` and temperature of the gate distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardConcreteParams {
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    pub temperature: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            stretch_lo: -0.1,
            stretch_hi: 1.1,
            temperature: 2.0 / 3.0,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HardConcreteParams {
    pub fn new(stretch_lo: f64, stretch_hi: f64, temperature: f64) -> Result<Self, GateError> {
        let p = Self {
            stretch_lo,
            stretch_hi,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(GateError::BadStretch {
                lo: self.stretch_lo,
                hi: self.stretch_hi,
            });
        }
        if !(self.temperature > 0.0) {
            return Err(GateError::BadTemperature(self.temperature));
        }
        Ok(())
    }

    /// `β · ln(−l / r)`: the location at which a gate is non-zero with
    /// probability exactly one half.
    pub fn half_location(&self) -> f64 {
        self.temperature * (-self.stretch_lo / self.stretch_hi).ln()
    }

    /// Draws a gate for location `loc` from uniform noise `u ∈ (0, 1)`.
    pub fn sample(&self, loc: f64, u: f64) -> f64 {
        self.sample_with_grad(loc, u).0
    }

    /// Sample plus its derivative w.r.t. `loc` (zero where clamped).
    pub fn sample_with_grad(&self, loc: f64, u: f64) -> (f64, f64) {
        let width = self.stretch_hi - self.stretch_lo;
        let s = logistic((u.ln() - (-u).ln_1p() + loc) / self.temperature);
        let stretched = s * width + self.stretch_lo;
        if stretched <= 0.0 {
            (0.0, 0.0)
        } else if stretched >= 1.0 {
            (1.0, 0.0)
        } else {
            (stretched, width * s * (1.0 - s) / self.temperature)
        }
    }

    /// `P(z > 0) = logistic(loc − β·ln(−l / r))`.
    pub fn prob_nonzero(&self, loc: f64) -> f64 {
        logistic(loc - self.half_location())
    }

    /// Noise-free gate used when a deterministic mask is needed.
    pub fn deterministic_gate(&self, loc: f64) -> f64 {
        let width = self.stretch_hi - self.stretch_lo;
        (logistic(loc) * width + self.stretch_lo).clamp(0.0, 1.0)
    }
}

pub fn prob_nonzero(loc: f64, params: &HardConcreteParams) -> f64 {
    params.prob_nonzero(loc)
}

pub fn sample_gate(loc: f64, params: &HardConcreteParams, u: f64) -> f64 {
    params.sample(loc, u)
}

/// Expected number of non-zero gates.
pub fn expected_l0(locs: &[f64], params: &HardConcreteParams) -> f64 {
    locs.iter().map(|&l| params.prob_nonzero(l)).sum()
}

/// Gradient of [`expected_l0`] w.r.t. every location.
pub fn expected_l0_grad(locs: &[f64], params: &HardConcreteParams) -> Vec<f64> {
    locs.iter()
        .map(|&l| {
            let p = params.prob_nonzero(l);
            p * (1.0 - p)
        })
        .collect()
}

/// Per-token location logits, one vector per interpreter layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateLocations {
    pub layers: Vec<Vec<f64>>,
}

impl GateLocations {
    pub fn last(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Expected L0 summed over every layer.
    pub fn expected_l0(&self, params: &HardConcreteParams) -> f64 {
        self.layers.iter().map(|l| expected_l0(l, params)).sum()
    }
}
