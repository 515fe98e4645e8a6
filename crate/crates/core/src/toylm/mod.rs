//! Small decoder-only transformer: checkpointed training, mid-layer capture,
//! patched forward passes and metric gradients.
//!
//! The mid-layer activation is the residual stream after block `mid_layer`
//! (1-based), i.e. the input to block `mid_layer + 1`.

mod checkpoint;
mod config;
mod math;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, MetricSpec};
pub use config::LmConfig;
pub use params::{BlockParams, LmParams};
pub use train::{train_lm, OptimizerSettings, TrainingRecord};
