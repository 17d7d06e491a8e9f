use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("cycle detected through layer `{0}`")]
    Cycle(String),

    #[error("layer `{layer}` references unknown input `{input}`")]
    DanglingInput { layer: String, input: String },

    #[error("graph has no layers")]
    EmptyGraph,

    #[error("graph must have exactly one output layer, found {0:?}")]
    AmbiguousOutput(Vec<String>),

    #[error("layer `{0}` is not an affine layer")]
    NotAffine(String),

    #[error("layer `{0}` not found")]
    UnknownLayer(String),

    #[error("shape mismatch at `{layer}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing weights for affine layer `{0}`")]
    MissingWeights(String),

    #[error("activation cache is missing layer `{0}`; run forward first")]
    StaleCache(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("dead channel {channel} in layer `{layer}` (std {std:e})")]
    DeadChannel { layer: String, channel: usize, std: f64 },

    #[error("weight matrix of layer `{0}` has zero norm")]
    ZeroNorm(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough patches for layer `{layer}`: need {needed}, have {available}")]
    NotEnoughPatches {
        layer: String,
        needed: usize,
        available: usize,
    },

    #[error("layer `{layer}` has {filters} filters but fan-in {fan_in}")]
    TooManyFilters {
        layer: String,
        filters: usize,
        fan_in: usize,
    },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn layer(layer: &str, reason: impl Into<String>) -> Self {
        Error::InvalidLayer {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
