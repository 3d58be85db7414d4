use thiserror::Error;

/// Errors surfaced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("frame {got} inserted after frame {last}; frame indices must strictly increase")]
    Sequencing { last: usize, got: usize },

    #[error("feature memory is empty")]
    EmptyMemory,

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tracking contract violated: {0}")]
    Tracking(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
