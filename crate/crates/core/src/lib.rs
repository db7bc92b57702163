//! Replay-free continual learning with parameter-isolated sub-networks.
//!
//! A single backbone is carved into per-task sub-networks by a write-once
//! ownership mask. Each task's weights are trained (by distillation from a
//! teacher, or by self-distillation from the unpruned model), then frozen.
//! Biases and batch-norm state live in per-task banks so that querying an old
//! sub-network reproduces it exactly. At test time every sub-network scores the
//! input and the most confident temperature-scaled prediction wins.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod network;
pub mod optim;
pub mod report;
pub mod scenarios;
pub mod tensor;
pub mod trainer;

pub use error::{MindError, Result};
