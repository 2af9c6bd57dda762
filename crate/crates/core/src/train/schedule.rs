use serde::{Deserialize, Serialize};

/// Linear warmup followed by cosine decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_epochs * self.steps_per_epoch as f64).round() as u64).min(self.total_steps())
    }

    /// Learning rate at `step`; zero at step 0, `base_lr` at the end of
    /// warmup, `min_lr` from the final step on.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (warm, total) = (self.warmup_steps(), self.total_steps());
        if step >= total {
            return self.min_lr;
        }
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let progress = (step - warm) as f64 / (total - warm).max(1) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
