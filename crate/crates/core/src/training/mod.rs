//! Optimizer, learning-rate schedule, early stopping and the training loop.

mod early_stop;
mod optim;
mod schedule;
mod trainer;

pub use early_stop::{EarlyStopConfig, EarlyStopState, EarlyStopper, EpochDecision};
pub use optim::{clip_gradients, global_norm, AdamWConfig, OptimizerState};
pub use schedule::SchedulerState;
pub use trainer::{
    batch_gradients, evaluate, micro_batches, read_metrics, train, write_metrics, EpochReport, EvalMetrics,
    MetricsRow, MetricsWriter, RunMode, StepGradients, TrainConfig, TrainOutcome,
};
