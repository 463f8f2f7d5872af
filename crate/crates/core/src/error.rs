use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid solution: {0}")]
    InvalidSolution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A mask-violating action or an unsatisfiable state.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
