use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point at index {index} is behind the camera (depth {depth:e})")]
    BehindCamera { index: usize, depth: f64 },

    #[error("no valid keypoints")]
    EmptyDetection,

    #[error("insufficient correspondences: need {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("viewpoint undefined for zero-length translation")]
    UndefinedViewpoint,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
