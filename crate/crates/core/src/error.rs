use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("numerical integration did not converge: {0}")]
    Integration(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl LabError {
    /// Stable machine-readable class, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            LabError::Shape(_) => "shape",
            LabError::NonFinite(_) => "non_finite",
            LabError::InvalidArgument(_) => "invalid_argument",
            LabError::Empty(_) => "empty",
            LabError::Diverged { .. } => "diverged",
            LabError::Integration(_) => "integration",
            LabError::InsufficientSamples(_) => "insufficient_samples",
            LabError::Config { .. } => "config",
            LabError::Checkpoint(_) => "checkpoint",
            LabError::Invariant(_) => "invariant",
            LabError::Io { .. } => "io",
            LabError::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure(cond: bool, err: impl FnOnce() -> LabError) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}
