use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every module of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("angle {theta} outside the domain [0, {max}]")]
    Domain { theta: f64, max: f64 },

    #[error("radial polynomial is not strictly increasing near theta = {theta:.6}")]
    NonMonotonic { theta: f64 },

    #[error("radius {radius} lies beyond the field of view (max {max})")]
    OutOfField { radius: f64, max: f64 },

    #[error("radial inversion did not converge for radius {radius}")]
    NoConvergence { radius: f64 },

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Vec<crate::estimator::TraceEntry>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
