use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value lies outside the domain of the operation (non-finite input,
    /// zero vector, out-of-range metric value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied parameter violates its precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The operation requires a property the operand does not advertise,
    /// e.g. a hermitian operator.
    #[error("contract error: {0}")]
    Contract(String),

    /// Stored data is missing or inconsistent with its manifest.
    #[error("integrity error in chunk {chunk}: {reason}")]
    Integrity { chunk: usize, reason: String },

    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}

pub(crate) use domain_err;
pub(crate) use param_err;
pub(crate) use shape_err;
