use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file did not conform to its schema. `context` carries line/column or field information.
    #[error("parse error in {path}: {context}")]
    Parse { path: PathBuf, context: String },

    /// Input was well-formed but violated an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation(_) | Error::Policy(_)
        )
    }
}
