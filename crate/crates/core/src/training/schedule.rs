use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step learning-rate schedule with weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Decays happen only at multiples of `decay_every` up to this epoch.
    #[serde(default)]
    pub decay_until: Option<usize>,
    pub weight_decay: f64,
}

impl Schedule {
    /// Full-scale pre-training: 3e-4, ×0.1 every 200 epochs, weight decay 1e-7.
    pub fn pretrain() -> Self {
        Schedule {
            base_lr: 3e-4,
            decay_factor: 0.1,
            decay_every: 200,
            decay_until: None,
            weight_decay: 1e-7,
        }
    }

    /// Pre-training schedule for the short desk-scale runs.
    pub fn desk_pretrain() -> Self {
        Schedule {
            base_lr: 1e-3,
            decay_every: 20,
            ..Self::pretrain()
        }
    }

    /// Fine-tuning: 5e-4, ×0.5 every 15 epochs up to epoch 60, weight decay 1e-2.
    pub fn finetune() -> Self {
        Schedule {
            base_lr: 5e-4,
            decay_factor: 0.5,
            decay_every: 15,
            decay_until: Some(60),
            weight_decay: 1e-2,
        }
    }

    /// Fine-tuning schedule for the short desk-scale runs.
    pub fn desk_finetune() -> Self {
        Schedule {
            base_lr: 1e-2,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `base_lr * decay_factor ^ floor(min(epoch, decay_until) / decay_every)`.
pub fn lr_at_epoch(schedule: &Schedule, epoch: usize) -> f64 {
    let capped = schedule.decay_until.map_or(epoch, |cap| epoch.min(cap));
    let decays = capped / schedule.decay_every;
    schedule.base_lr * schedule.decay_factor.powi(decays as i32)
}
