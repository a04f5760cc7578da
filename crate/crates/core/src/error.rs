use thiserror::Error;

/// Errors produced by the tuning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("propagation diverged at step {step}")]
    PropagationDiverged { step: usize },

    #[error("filter diverged at time index {k}: {reason}")]
    Diverged { k: usize, reason: String },

    #[error("innovation covariance is singular at time index {k}")]
    SingularInnovation { k: usize },

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("step did not reduce the cost after {halvings} halvings")]
    LineSearch { halvings: usize },

    #[error("dataset model '{found}' does not match requested model '{expected}'")]
    ModelMismatch { expected: String, found: String },

    #[error("unknown model identifier '{0}'")]
    UnknownModel(String),

    #[error("failed to parse dataset {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed dataset: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
