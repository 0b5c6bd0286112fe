use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: header declares {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("band count mismatch: expected {expected}, found {found}")]
    BandMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("wavelength {0} nm is not on the grid")]
    OffGrid(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fibre count target {target} unreachable: only {available} centres inside the bundle")]
    UnreachableTarget { target: usize, available: usize },

    #[error("no effective pixels")]
    NoEffectivePixels,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("png error: {0}")]
    Png(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
