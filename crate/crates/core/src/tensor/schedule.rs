use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

/// Linear warm-up followed by cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub floor_fraction: f64,
    pub steps_per_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_start_lr: 1e-5,
            warmup_epochs: 2,
            total_epochs: 20,
            floor_fraction: 0.01,
            steps_per_epoch: 1,
        }
    }
}

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_epochs * self.steps_per_epoch).min(self.total_steps())
    }

    fn floor(&self) -> f64 {
        self.floor_fraction * self.base_lr
    }

    fn warmup_value(&self, step: f64) -> f64 {
        let w = self.warmup_steps() as f64;
        self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * step / w
    }

    fn cosine_value(&self, step: f64) -> f64 {
        let w = self.warmup_steps() as f64;
        let last = (self.total_steps() - 1) as f64;
        let progress = if last > w { (step - w) / (last - w) } else { 1.0 };
        let floor = self.floor();
        floor + (self.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps() {
            return Err(TensorError::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps()
            )));
        }
        if step < self.warmup_steps() {
            Ok(self.warmup_value(step as f64))
        } else {
            Ok(self.cosine_value(step as f64))
        }
    }
}
