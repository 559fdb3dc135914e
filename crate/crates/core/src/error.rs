use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are split so that callers (the CLI in particular) can tell
/// numeric failures apart from I/O or configuration problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("record {index}: coordinate ({x}, {y}) lies outside the half court")]
    OutOfDomain { index: usize, x: f64, y: f64 },

    #[error("player filter mismatch: {0}")]
    PlayerFilter(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("series for V_n({t}) with n = {n} did not converge within {cap} terms")]
    SeriesDivergence { n: usize, t: usize, cap: usize },

    #[error("non-finite log-posterior at iteration {iteration}; state: {dump}")]
    NonFinite { iteration: usize, dump: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from the numerics rather than from inputs on disk.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::SeriesDivergence { .. } | Error::NonFinite { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
