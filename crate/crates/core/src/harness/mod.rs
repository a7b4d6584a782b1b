//! Loss, optimizers, schedule, and the train / evaluate / sweep loops.

mod config;
mod loss;
mod optim;
mod train;

pub use config::{OptimizerKind, TrainRunConfig};
pub use loss::{accuracy, cross_entropy};
pub use optim::{adamw_step, lr_at, sgd_step, AdamHyper, Optimizer, ParamState};
pub use train::{
    evaluate, evaluate_dataset, sweep, sweep_variants, train, EvalResult, MetricsRow, Split as RowSplit, SweepVariant,
    TrainOutcome, METRICS_HEADER,
};
