//! Error type shared by every module of the lab.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Two operands whose shapes do not line up.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A configuration that violates one or more constraints.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Bad caller-supplied data (token ids, labels, empty batches, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Numerical computation that is undefined for the given data.
    #[error("computation error: {0}")]
    Compute(String),

    /// Loss or gradient became NaN during training.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Format(String),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(vec![msg.into()])
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable name of the failing stage.
    pub fn stage(&self) -> &'static str {
        match self {
            LabError::Shape { .. } | LabError::NonFinite(_) | LabError::Compute(_) => "compute",
            LabError::Config(_) => "config",
            LabError::Input(_) => "input",
            LabError::Divergence { .. } => "train",
            LabError::Io { .. } => "io",
            LabError::Format(_) => "format",
        }
    }
}
