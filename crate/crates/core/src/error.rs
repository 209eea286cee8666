use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MedcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MedcError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty classes (no positive labels): {0:?}")]
    EmptyClasses(Vec<usize>),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MedcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MedcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from bad user input (config, data shape,
    /// file format) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MedcError::Shape(_)
                | MedcError::Invalid(_)
                | MedcError::EmptyClasses(_)
                | MedcError::Parse { .. }
                | MedcError::Config(_)
                | MedcError::Checkpoint(_)
                | MedcError::Json(_)
        ) || matches!(self, MedcError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
