//! Step learning-rate schedule.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LRSchedule {
    /// Epochs at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_epochs: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        Self {
            milestones: vec![30, 45],
            factor: 0.1,
            total_epochs: 60,
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(Error::Invalid(format!("lr factor must be positive, got {}", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            )));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.total_epochs {
                return Err(Error::Invalid(format!(
                    "milestone {last} is not before total_epochs {}",
                    self.total_epochs
                )));
            }
        }
        Ok(())
    }
}

/// `base_lr * factor^k` where `k` counts the milestones at or before `epoch`.
pub fn lr_at(epoch: usize, schedule: &LRSchedule, base_lr: f64) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    let k = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(base_lr * schedule.factor.powi(k as i32))
}
