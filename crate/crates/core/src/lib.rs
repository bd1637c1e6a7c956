//! Adapter and LoRA fine-tuning on a toy frozen Transformer, with the
//! initial-residual ("SIBO") injection and the instrumentation needed to
//! measure token-wise over-smoothing.

pub mod budget;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numcore;
pub mod peft;
pub mod train;

pub use error::{LabError, Result};
