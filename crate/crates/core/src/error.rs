use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is below the normalization threshold")]
    ZeroVector(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("requested {requested} samples but only {available} candidates are available")]
    CountTooLarge { requested: usize, available: usize },
    #[error("selection must be empty for plain InfoNCE")]
    SelectionNotEmpty,
    #[error("selection not valid for this loss: {0}")]
    Selection(String),
    #[error("sample selection overlaps: {0}")]
    Overlap(String),
    #[error("channel count {channels} does not divide feature width {feature_dim}")]
    IndivisibleChannels { channels: usize, feature_dim: usize },
    #[error("source image has no known microns-per-pixel")]
    UnknownMpp,
    #[error("subsampling produced an empty set")]
    EmptyResult,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("feature store holds mixed widths ({0} vs {1})")]
    ModeMismatch(usize, usize),
    #[error("insufficient class count: {0}")]
    InsufficientClassCount(String),
    #[error("{metric} needs both classes present")]
    SingleClass { metric: &'static str },
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
