//! Optimizer, learning-rate rules and the phase-based training engine.

mod optim;
mod phase;
mod pipeline;
mod schedule;
mod sink;

pub use optim::{adam_step, clip_global_norm, mask_gradients, OptimizerState, BETA1, BETA2, EPSILON};
pub use phase::{run_phase, run_phase_with, seed_for, StepHook, TrainOptions, TrainState};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineRun, RunCheckpoint};
pub use schedule::{LrRule, PhaseKind, PhasePlan, RejuvInit};
pub use sink::{CsvSink, LogRecord, MemorySink, MetricsSink, NullSink, METRICS_HEADER};
