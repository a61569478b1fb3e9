//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QkanError>;

#[derive(Debug, Error)]
pub enum QkanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("degenerate spectrum: condition number {condition:.3e} exceeds {limit:.1e}")]
    DegenerateSpectrum { condition: f64, limit: f64 },

    #[error("spline fit failed: {0}")]
    Fit(String),

    #[error("x = {x} outside spline domain [{lo}, {hi}]")]
    Domain { x: f64, lo: f64, hi: f64 },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl QkanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QkanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        QkanError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            QkanError::Config { .. } | QkanError::InvalidArgument(_) => 2,
            QkanError::Parse { .. } | QkanError::Io { .. } | QkanError::DimensionMismatch { .. } => 3,
            QkanError::DegenerateSpectrum { .. }
            | QkanError::Fit(_)
            | QkanError::Domain { .. }
            | QkanError::Numerical(_) => 4,
        }
    }
}

pub(crate) fn check_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(QkanError::InvalidArgument(format!("{what} must be finite, got {value}")))
    }
}
