use serde::{Deserialize, Serialize};

use super::schedule::SchedulerState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub patience: u32,
    pub soft_window: u32,
    pub lr_reduction: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 9,
            soft_window: 3,
            lr_reduction: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochDecision {
    /// Keep training; `improved` marks a new best.
    Continue { improved: bool },
    /// Restore the best state, lower the learning-rate bounds, keep going.
    SoftReset,
    /// Restore the best state and stop.
    Stop,
}

/// Counters of the early stopper. The non-improvement counter is not
/// cleared by a soft reset, so with the defaults resets happen after 3
/// and 6 flat epochs and training stops after 9. Over a whole run at most
/// [`EarlyStopState::max_resets`] resets happen, which bounds the number of
/// learning-rate levels.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub config: EarlyStopConfig,
    pub best_val_loss: f64,
    pub epochs_since_improve: u32,
    pub resets_done: u32,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Result<Self> {
        if config.soft_window == 0 || config.patience == 0 {
            return Err(Error::Config("patience and soft_window must be positive".into()));
        }
        if !(config.lr_reduction >= 1.0) {
            return Err(Error::Config("lr_reduction must be at least 1".into()));
        }
        Ok(Self {
            config,
            best_val_loss: f64::INFINITY,
            epochs_since_improve: 0,
            resets_done: 0,
        })
    }

    /// Window multiples strictly below the patience: 2 with the defaults.
    pub fn max_resets(&self) -> u32 {
        (self.config.patience - 1) / self.config.soft_window
    }

    pub fn epoch_end(&mut self, val_loss: f64) -> Result<EpochDecision> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss}")));
        }
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.epochs_since_improve = 0;
            return Ok(EpochDecision::Continue { improved: true });
        }
        self.epochs_since_improve += 1;
        let n = self.epochs_since_improve;
        if n >= self.config.patience {
            Ok(EpochDecision::Stop)
        } else if n.is_multiple_of(self.config.soft_window) && self.resets_done < self.max_resets() {
            self.resets_done += 1;
            Ok(EpochDecision::SoftReset)
        } else {
            Ok(EpochDecision::Continue { improved: false })
        }
    }
}

/// Early stopping with a snapshot of the best state `S`.
#[derive(Clone, Debug)]
pub struct EarlyStopper<S> {
    pub state: EarlyStopState,
    best: Option<S>,
}

impl<S: Clone> EarlyStopper<S> {
    pub fn new(config: EarlyStopConfig) -> Result<Self> {
        Ok(Self {
            state: EarlyStopState::new(config)?,
            best: None,
        })
    }

    pub fn best(&self) -> Option<&S> {
        self.best.as_ref()
    }

    /// Records `current` as the new best on improvement; on a soft reset or
    /// stop, overwrites `current` with the best snapshot, and on a soft
    /// reset also lowers the scheduler's bounds.
    pub fn epoch_end(
        &mut self,
        val_loss: f64,
        current: &mut S,
        sched: &mut SchedulerState,
    ) -> Result<EpochDecision> {
        let decision = self.state.epoch_end(val_loss)?;
        match decision {
            EpochDecision::Continue { improved: true } => self.best = Some(current.clone()),
            EpochDecision::Continue { improved: false } => {}
            EpochDecision::SoftReset | EpochDecision::Stop => {
                if let Some(best) = &self.best {
                    *current = best.clone();
                }
                if decision == EpochDecision::SoftReset {
                    sched.reduce(self.state.config.lr_reduction);
                }
            }
        }
        Ok(decision)
    }
}
