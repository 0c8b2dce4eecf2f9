use std::path::PathBuf;

/// Errors produced by the trajectory pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed AIS header: {0}")]
    Header(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry error in ring {ring}: {reason}")]
    Geometry { ring: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "non-finite training loss at step {step} (batch {batch}, steps {diffusion_steps:?}, parameter norm {param_norm})"
    )]
    NonFiniteLoss {
        step: u64,
        batch: usize,
        diffusion_steps: Vec<usize>,
        param_norm: f64,
    },

    #[error("corrupt container at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn io_path(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::io_path(path, source)
}
