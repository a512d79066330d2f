use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative routine failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A matrix stayed non-positive-definite after the full jitter schedule.
    #[error("cholesky factorisation failed (n = {size}, last jitter = {jitter:e})")]
    Factorisation { size: usize, jitter: f64 },

    /// Tensor or array shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was asked to do something it deliberately refuses.
    #[error("refused: {0}")]
    Refused(String),

    /// Problem reading a real-data CSV.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Malformed line in a task or checkpoint file.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical routines (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Factorisation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
