use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("track needs at least 4 control points, got {0}")]
    TooFewPoints(usize),
    #[error("sample spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("track width must be positive and finite, got {0}")]
    InvalidWidth(f64),
    #[error("control points {0} and {1} coincide")]
    DegenerateSegment(usize, usize),
    #[error("track polygon self-intersects (segments {0} and {1})")]
    SelfIntersecting(usize, usize),

    #[error("non-finite simulation input: {0}")]
    NonFinite(&'static str),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("car is {offset:.1} m from the centerline, beyond the {limit:.1} m the oracle accepts")]
    OffTrack { offset: f64, limit: f64 },
    #[error("oracle did not finish a lap within {0} steps")]
    StepBudgetExhausted(u64),

    #[error("unsupported frame size {0}x{1}")]
    UnsupportedSize(usize, usize),
    #[error("cannot downsample {from_w}x{from_h} to {to_w}x{to_h}: sizes do not divide")]
    NonDivisible { from_w: usize, from_h: usize, to_w: usize, to_h: usize },

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate dataset: pixel standard deviation is zero")]
    ZeroStd,
    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model produced a non-finite output")]
    NonFiniteOutput,

    #[error("visualization bridge: {0}")]
    Bridge(String),

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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
