use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside the time range [{min}, {max}]")]
    Range { value: f64, min: f64, max: f64 },

    #[error("non-finite input to {0}")]
    Domain(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("matrix is not positive definite at any jitter level up to {max_jitter:e} (minimum eigenvalue estimate {min_eigenvalue:e})")]
    Singular { min_eigenvalue: f64, max_jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("unsupported model format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("split error: {0}")]
    Split(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures (factorizations, non-finite results) as opposed to
    /// bad input. The CLI maps these to exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::Numerical(_) | Error::Domain(_)
        )
    }
}
