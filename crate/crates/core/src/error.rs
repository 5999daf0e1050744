use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("malformed tensor container: {0}")]
    Container(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no sequences found under {}", .0.display())]
    NoSequences(PathBuf),

    #[error("missing annotations file {}", .0.display())]
    MissingAnnotations(PathBuf),

    #[error("missing frame {}", .0.display())]
    MissingFrame(PathBuf),

    #[error("malformed annotation at {}:{line}: {msg}", .path.display())]
    MalformedAnnotation { path: PathBuf, line: usize, msg: String },

    #[error("point ({x}, {y}) in frame {frame} lies outside the {width}x{height} image")]
    OutOfBounds { frame: String, x: f64, y: f64, width: usize, height: usize },

    #[error("frame order is not strictly increasing in sequence {sequence} at {frame}")]
    FrameOrder { sequence: String, frame: String },

    #[error("split ranges overlap: {0}")]
    SplitOverlap(String),

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
