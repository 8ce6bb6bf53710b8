//! Tri-stage learning-rate schedule: linear warmup, hold, exponential decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriStage {
    pub peak: f64,
    /// Fractions of the run spent warming up, holding and decaying.
    pub phase_ratios: [f64; 3],
    pub init_scale: f64,
    pub final_scale: f64,
}

impl Default for TriStage {
    fn default() -> Self {
        Self { peak: 1e-4, phase_ratios: [0.25, 0.4, 0.35], init_scale: 0.01, final_scale: 0.01 }
    }
}

impl TriStage {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.phase_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.phase_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("phase ratios must be non-negative and sum to 1".into()));
        }
        if !(self.peak > 0.0 && self.init_scale > 0.0 && self.final_scale > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for optimizer update `update` of a `total`-update run.
    pub fn lr(&self, update: u64, total: u64) -> f64 {
        self.lr_at(update as f64, total as f64)
    }

    /// The schedule at a real-valued position `u` of a `total`-update run.
    pub fn lr_at(&self, u: f64, total: f64) -> f64 {
        let warmup = self.phase_ratios[0] * total;
        let hold = self.phase_ratios[1] * total;
        let decay = self.phase_ratios[2] * total;
        if u < warmup {
            let start = self.init_scale * self.peak;
            start + (self.peak - start) * u / warmup
        } else if u < warmup + hold {
            self.peak
        } else if decay > 0.0 && u < warmup + hold + decay {
            self.peak * math::exp(math::ln(self.final_scale) * (u - warmup - hold) / decay)
        } else {
            self.peak * self.final_scale
        }
    }
}
