//! Step-decay learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `initial_lr / decay_factor^k`, where `k` counts the milestones already
/// reached. Milestones are either an explicit list or every `period` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub initial_lr: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub milestones: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<u64>,
}

fn default_decay() -> f64 {
    2.0
}

impl ScheduleSpec {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            decay_factor: 2.0,
            milestones: Vec::new(),
            period: None,
        }
    }

    pub fn with_milestones(initial_lr: f64, milestones: Vec<u64>) -> Self {
        Self {
            milestones,
            ..Self::constant(initial_lr)
        }
    }

    pub fn periodic(initial_lr: f64, period: u64) -> Self {
        Self {
            period: Some(period),
            ..Self::constant(initial_lr)
        }
    }

    /// 2e-4 halved every 200k iterations.
    pub fn pretrain() -> Self {
        Self::periodic(2e-4, 200_000)
    }

    /// 1e-4 halved at 50k, 100k, 200k and 300k.
    pub fn gan() -> Self {
        Self::with_milestones(1e-4, vec![50_000, 100_000, 200_000, 300_000])
    }

    /// Same milestones with the initial rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            initial_lr: self.initial_lr * factor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::Config(format!(
                "initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_factor > 1.0) || !self.decay_factor.is_finite() {
            return Err(Error::Config(format!(
                "decay_factor must be > 1, got {}",
                self.decay_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        match self.period {
            Some(0) => Err(Error::Config("period must be >= 1".into())),
            Some(_) if !self.milestones.is_empty() => Err(Error::Config(
                "give either milestones or period, not both".into(),
            )),
            _ => Ok(()),
        }
    }

    fn decays_at(&self, iteration: u64) -> i32 {
        let k = match self.period {
            Some(p) => iteration / p,
            None => self.milestones.iter().filter(|&&m| m <= iteration).count() as u64,
        };
        k.min(i32::MAX as u64) as i32
    }
}

pub fn lr_at(schedule: &ScheduleSpec, iteration: u64) -> f64 {
    schedule.initial_lr / schedule.decay_factor.powi(schedule.decays_at(iteration))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gan_schedule() {
        let s = ScheduleSpec::gan();
        assert_eq!(lr_at(&s, 0), 1e-4);
        assert_eq!(lr_at(&s, 49_999), 1e-4);
        assert_eq!(lr_at(&s, 50_000), 5e-5);
        assert_eq!(lr_at(&s, 400_000), 6.25e-6);
    }

    #[test]
    fn periodic_schedule() {
        let s = ScheduleSpec::pretrain();
        assert_eq!(lr_at(&s, 199_999), 2e-4);
        assert_eq!(lr_at(&s, 200_000), 1e-4);
        assert_eq!(lr_at(&s, 400_000), 5e-5);
    }

    #[test]
    fn non_increasing() {
        let s = ScheduleSpec::gan();
        let mut prev = f64::INFINITY;
        for it in (0..500_000).step_by(997) {
            let lr = lr_at(&s, it);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::gan().validate().is_ok());
        assert!(ScheduleSpec::constant(0.0).validate().is_err());
        assert!(ScheduleSpec::with_milestones(1.0, vec![5, 5])
            .validate()
            .is_err());
        let mut s = ScheduleSpec::gan();
        s.decay_factor = 1.0;
        assert!(s.validate().is_err());
        s = ScheduleSpec::periodic(1.0, 10);
        s.milestones = vec![1];
        assert!(s.validate().is_err());
    }
}
