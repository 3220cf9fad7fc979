//! Partial multi-task learning for aerial object detection and semantic
//! segmentation, with frozen single-task teachers supplying soft labels and
//! feature-imitation losses for the task a batch is not annotated for.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
