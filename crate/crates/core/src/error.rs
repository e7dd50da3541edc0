use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GnsnError>;

#[derive(Debug, Error)]
pub enum GnsnError {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{0}")]
    Undefined(String),

    #[error("divergence at step {step} ({solver}): non-finite {term}")]
    Divergence {
        step: usize,
        solver: String,
        term: String,
    },

    #[error("solver failure ({solver}): {message}")]
    Solver { solver: String, message: String },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GnsnError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GnsnError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GnsnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        GnsnError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GnsnError::Parse { .. }
                | GnsnError::InvalidGraph(_)
                | GnsnError::Config(_)
                | GnsnError::Io { .. }
                | GnsnError::Json(_)
        )
    }
}
