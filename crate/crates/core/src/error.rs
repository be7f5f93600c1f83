use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layer settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called out of order or with inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad values handed to an operation (labels outside {0,1}, negative sizes, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("{path}: format error at byte {offset}: {msg}")]
    BinaryFormat {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("format error at field {field}: {msg}")]
    LabelFormat { field: usize, msg: String },

    #[error("{path}:{line}: {source}")]
    AtLine {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("scene placement failed after {attempts} attempts")]
    Placement { attempts: usize },

    #[error("box does not intersect the grid extent")]
    EmptyRegion,

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or missing data files rather than settings.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BinaryFormat { .. }
                | Error::LabelFormat { .. }
                | Error::AtLine { .. }
                | Error::Io { .. }
                | Error::Checkpoint(_)
        )
    }
}
