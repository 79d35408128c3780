use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("pixel ({u:.3}, {v:.3}) lies outside the {width}x{height} frame")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        dump: Box<crate::bundle::StateDump>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Failures while reading or writing the on-disk formats. Each kind is
/// distinct so callers can react to, say, truncation separately from bad
/// values.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("{path}: truncated payload: expected {expected} {unit}, found {actual}")]
    Truncated {
        path: PathBuf,
        unit: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{path}:{location}: non-finite value")]
    NonFinite { path: PathBuf, location: String },

    #[error("{path}:{location}: value out of range: {message}")]
    Range {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}
