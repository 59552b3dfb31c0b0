use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-decay schedule for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    /// Epochs at which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip weight decay on biases and normalization shifts.
    pub bias_decay_exempt: bool,
}

impl Default for StageSchedule {
    /// 60 epochs in phases of 20/20/10/10, lr 0.01, momentum 0.9, wd 1e-4.
    fn default() -> Self {
        StageSchedule::from_phases(&[20, 20, 10, 10], 0.01)
    }
}

impl StageSchedule {
    /// Consecutive phase lengths; the rate drops at each phase boundary.
    pub fn from_phases(phases: &[usize], base_lr: f64) -> Self {
        let mut milestones = Vec::new();
        let mut acc = 0;
        for (i, &p) in phases.iter().enumerate() {
            acc += p;
            if i + 1 < phases.len() {
                milestones.push(acc);
            }
        }
        StageSchedule {
            epochs: acc,
            lr_milestones: milestones,
            base_lr,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            bias_decay_exempt: true,
        }
    }

    /// The 20/20/10/10 shape scaled to `epochs` total epochs.
    pub fn scaled(epochs: usize, base_lr: f64) -> Self {
        let third = (epochs as f64 / 3.0).round() as usize;
        let sixth = (epochs as f64 / 6.0).round() as usize;
        let phases: Vec<usize> = [third, third, sixth]
            .into_iter()
            .scan(epochs, |left, p| {
                let take = p.min(*left);
                *left -= take;
                Some(take)
            })
            .chain(std::iter::once(epochs.saturating_sub(2 * third + sixth)))
            .filter(|&p| p > 0)
            .collect();
        Self::from_phases(&phases, base_lr)
    }

    pub fn constant(epochs: usize, lr: f64) -> Self {
        StageSchedule {
            lr_milestones: Vec::new(),
            ..Self::from_phases(&[epochs], lr)
        }
    }

    pub fn phases(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = 0;
        for &m in self.lr_milestones.iter().chain(std::iter::once(&self.epochs)) {
            out.push(m - prev);
            prev = m;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("a stage needs at least one epoch"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "milestones {:?} must be strictly increasing",
                self.lr_milestones
            )));
        }
        if self.lr_milestones.last().is_some_and(|&m| m > self.epochs) {
            return Err(Error::invalid(format!(
                "milestone {:?} beyond {} epochs",
                self.lr_milestones.last(),
                self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("decay, momentum or weight decay out of range"));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(schedule: &StageSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            schedule.epochs
        )));
    }
    let passed = schedule.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(schedule.base_lr * schedule.lr_decay.powi(passed as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_schedules() {
        assert_eq!(StageSchedule::scaled(60, 0.01).phases(), vec![20, 20, 10, 10]);
        assert_eq!(StageSchedule::scaled(20, 0.01).phases(), vec![7, 7, 3, 3]);
        assert_eq!(StageSchedule::scaled(23, 0.01).phases(), vec![8, 8, 4, 3]);
        assert_eq!(StageSchedule::scaled(1, 0.01).epochs, 1);
        assert_eq!(StageSchedule::scaled(2, 0.01).epochs, 2);
    }

    #[test]
    fn validation() {
        let mut s = StageSchedule::default();
        assert!(s.validate().is_ok());
        s.lr_milestones = vec![20, 20];
        assert!(s.validate().is_err());
        s.lr_milestones = vec![70];
        assert!(s.validate().is_err());
        assert!(lr_at(&StageSchedule::default(), 60).is_err());
    }
}
