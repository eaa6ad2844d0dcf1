use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(N_e, lr, w_1, w_2, w_3)`: epochs, peak rate, and warmup/hold/decay fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub warmup: f64,
    pub hold: f64,
    pub decay: f64,
    /// Rate at the end of the decay phase, relative to `lr`.
    #[serde(default = "default_floor")]
    pub decay_floor_ratio: f64,
}

fn default_floor() -> f64 {
    0.01
}

impl TrainSchedule {
    pub fn new(epochs: usize, lr: f64, warmup: f64, hold: f64, decay: f64) -> Self {
        Self {
            epochs,
            lr,
            warmup,
            hold,
            decay,
            decay_floor_ratio: default_floor(),
        }
    }

    /// `(100, 1e-3, 20%, 0, 80%)`, used for supervised pretraining.
    pub fn supervised() -> Self {
        Self::new(100, 1e-3, 0.2, 0.0, 0.8)
    }

    /// `(50, 5e-4, 0, 50%, 50%)`, used for multilingual self-training.
    pub fn xlst_multi() -> Self {
        Self::new(50, 5e-4, 0.0, 0.5, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [self.warmup, self.hold, self.decay];
        if fractions.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config(format!(
                "schedule fractions {fractions:?} outside [0, 1]"
            )));
        }
        if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "schedule fractions {fractions:?} must sum to 1"
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if !(self.decay_floor_ratio > 0.0 && self.decay_floor_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "decay_floor_ratio {} outside (0, 1]",
                self.decay_floor_ratio
            )));
        }
        Ok(())
    }

    /// Linear warmup from 0, constant hold, then exponential decay to `lr·decay_floor_ratio`.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return self.lr;
        }
        let s = step.min(total_steps) as f64 / total_steps as f64;
        if s < self.warmup {
            return self.lr * s / self.warmup;
        }
        let decay_start = self.warmup + self.hold;
        if s <= decay_start || self.decay == 0.0 {
            return self.lr;
        }
        let p = ((s - decay_start) / self.decay).min(1.0);
        self.lr * self.decay_floor_ratio.powf(p)
    }
}
