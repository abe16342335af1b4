use std::f64::consts::PI;

use crate::{Error, Result};

/// Linear warmup to `lr_max`, then cosine annealing from `lr_max` toward
/// `lr_min` over cycles of `cycle_len` steps, restarting at the top of each
/// cycle. Cycles are counted from the end of warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// `T_i`: steps per cycle (one epoch).
    pub cycle_len: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl SchedulerState {
    pub fn new(warmup_steps: u64, lr_max: f64, lr_min: f64, cycle_len: u64) -> Result<Self> {
        if !(lr_min >= 0.0 && lr_min < lr_max && lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {lr_min} and {lr_max}"
            )));
        }
        if cycle_len == 0 {
            return Err(Error::Config("cycle length must be positive".into()));
        }
        Ok(Self {
            warmup_steps,
            lr_max,
            lr_min,
            cycle_len,
            step: 0,
        })
    }

    /// `T_cur` for `step`; `None` during warmup.
    pub fn t_cur(&self, step: u64) -> Option<u64> {
        (step >= self.warmup_steps).then(|| (step - self.warmup_steps) % self.cycle_len)
    }

    /// Learning rate at global step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.t_cur(step) {
            Some(t) => {
                let phase = PI * t as f64 / self.cycle_len as f64;
                self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
            }
            None => self.lr_max * step as f64 / self.warmup_steps as f64,
        }
    }

    /// Advances one step and returns the rate for that step's update.
    pub fn tick(&mut self) -> f64 {
        self.step += 1;
        self.lr_at(self.step)
    }

    /// Divides both bounds by `factor`.
    pub fn reduce(&mut self, factor: f64) {
        self.lr_max /= factor;
        self.lr_min /= factor;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = SchedulerState::new(2000, 1e-4, 1e-6, 100).unwrap();
        assert_eq!(s.lr_at(1000), 5e-5);
        assert_eq!(s.lr_at(0), 0.0);
    }

    #[test]
    fn continuous_at_warmup_end() {
        let s = SchedulerState::new(50, 3e-4, 3e-6, 64).unwrap();
        let before = s.lr_max * 50.0 / 50.0;
        assert_eq!(s.lr_at(50), 3e-4);
        assert_eq!(before, s.lr_at(50));
        assert!((s.lr_at(49) - 3e-4 * 49.0 / 50.0).abs() < 1e-18);
    }

    #[test]
    fn cycle_points() {
        let s = SchedulerState::new(0, 1e-3, 1e-5, 10).unwrap();
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(s.lr_at(9) < 1e-4 && s.lr_at(9) > 1e-5);
        assert_eq!(s.lr_at(10), 1e-3);
    }

    #[test]
    fn reductions_are_exact() {
        let mut s = SchedulerState::new(0, 3e-4, 3e-6, 10).unwrap();
        s.reduce(100.0);
        s.reduce(100.0);
        assert_eq!(s.lr_max, 3e-4 / 100.0 / 100.0);
        assert!(SchedulerState::new(0, 1e-3, 1e-3, 10).is_err());
    }
}
