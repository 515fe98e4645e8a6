//! Toy-scale laboratory for tracing linguistic features across language-model
//! training checkpoints.
//!
//! The crate is organized along the pipeline:
//!
//! - [`corpus`]: synthetic agreement grammar, token streams and minimal pairs.
//! - [`toylm`]: a small decoder-only transformer with checkpointed training,
//!   mid-layer capture, patched forward passes and metric gradients.
//! - [`actstore`]: row-aligned activation shards, normalization and batching.
//! - [`dictcore`]: sparse crosscoders (single-source SAEs included), their loss,
//!   gradients, trainer and quality metrics.
//! - [`attribution`]: the log-probability-difference metric, exact and
//!   integrated-gradient indirect effects, RelDec and RelIE.
//! - [`analysis`]: phase-transition signals, ablation validation, overlap
//!   counts, top-activating sequences and report exports.

pub mod actstore;
pub mod analysis;
pub mod attribution;
pub mod container;
pub mod corpus;
pub mod dictcore;
mod error;
pub mod toylm;
pub mod util;

pub use error::{Error, Result};
