use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the correspondence engine.
#[derive(Debug, Error)]
pub enum FmapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("eigensolver did not converge after {iterations} iterations (max residual {max_residual:.3e})")]
    Convergence {
        iterations: usize,
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("non-finite value: {0}")]
    Numeric(String),
}

impl FmapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmapError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical stages (solver divergence, NaN losses).
    pub fn is_numerical(&self) -> bool {
        matches!(self, FmapError::Convergence { .. } | FmapError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, FmapError>;
