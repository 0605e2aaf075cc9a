use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no points after filtering")]
    NoPoints,

    #[error("dangling surfel handle {0}")]
    DanglingSurfel(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite upstream gradient in the {0} map")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss term `{term}` (view {view})")]
    NonFiniteLoss { term: String, view: usize },

    #[error("degenerate plane")]
    DegeneratePlane,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dataset validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
