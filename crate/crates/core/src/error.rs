use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for a rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("d_max {d_max} out of range for width {width}")]
    DisparityOutOfRange { d_max: usize, width: usize },

    #[error("softmax temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("laplacian scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("loss mask selects no pixels")]
    EmptyMask,

    #[error("channel mismatch: expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("backward called without a recorded forward pass")]
    GraphNotRecorded,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("stage {requested} cannot follow {completed}")]
    StageOrder { completed: String, requested: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
