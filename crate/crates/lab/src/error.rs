use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output directory {0} already exists and is not empty")]
    OutputExists(PathBuf),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type LabResult<T> = std::result::Result<T, LabError>;

impl LabError {
    /// 2 for anything the user can fix in their inputs, 3 for numerical
    /// failures, 1 for I/O trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) | LabError::OutputExists(_) | LabError::Missing(_) | LabError::Parse { .. } => 2,
            LabError::Numerical(_) => 3,
            LabError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<icl_core::Error> for LabError {
    fn from(e: icl_core::Error) -> Self {
        use icl_core::Error as E;
        match e {
            E::NonFiniteLogits | E::NonFinite(_) | E::Diverged { .. } | E::AllContextsExcluded(_) => {
                LabError::Numerical(e.to_string())
            }
            E::Shape { .. }
            | E::InvalidConfig(_)
            | E::RejectionCap { .. }
            | E::NoDenseSparseContexts
            | E::Unsupported(_) => LabError::Validation(e.to_string()),
        }
    }
}

impl From<icl_core::training::TrainFailure> for LabError {
    fn from(f: icl_core::training::TrainFailure) -> Self {
        let last = f
            .last_good
            .map(|c| format!(" (last good checkpoint: step {})", c.step))
            .unwrap_or_default();
        match LabError::from(f.error) {
            LabError::Numerical(m) => LabError::Numerical(format!("{m}{last}")),
            other => other,
        }
    }
}
