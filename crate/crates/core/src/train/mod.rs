//! Partial multi-task training: alternating detection/segmentation passes
//! accumulate gradients into one update, optionally distilling from frozen
//! single-task teachers.

mod batch;
mod config;
mod evaluate;
mod optim;
mod run;
mod step;

pub use batch::{batch_flips, make_batch, mix, Sampler, TaskBatch};
pub use config::{apply_override, EvalConfig, ExperimentConfig, Mode, OptimizerKind, PerTask, Schedule};
pub use evaluate::{evaluate_detection, evaluate_segmentation, evaluate_task, predict_boxes, predict_masks, EvalReport};
pub use optim::Optimizer;
pub use run::{
    batch_for, device, effective_spec, fresh_state, prepare, run_experiment, run_prepared, train_teacher, BestMetric, Environment,
    MetricsLog, Prepared, Report, Role, RunLock, RunOptions, RunOutcome, DEVICE_ENV,
};
pub use step::{
    accumulate_pass, apply_update, build_pass_losses, partial_mtl_iteration, pass_heads, single_task_iteration, ByTask,
    PassLosses, TrainState,
};
