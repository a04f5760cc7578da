use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] kftune_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 1 for usage and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use kftune_core::Error as E;
        match self {
            CliError::Numerical(_) => 2,
            CliError::Core(
                E::Diverged { .. }
                | E::PropagationDiverged { .. }
                | E::SingularInnovation { .. }
                | E::SingularInformation(_)
                | E::LineSearch { .. },
            ) => 2,
            _ => 1,
        }
    }
}
