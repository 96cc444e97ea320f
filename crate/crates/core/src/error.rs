use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("PLY vertex element has no color properties")]
    MissingColor,
    #[error("PLY body truncated: expected {expected} vertices, found {found}")]
    TruncatedBody { expected: usize, found: usize },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("requested {count} samples from {points} points")]
    CountExceedsPoints { count: usize, points: usize },
    #[error("requested {k} neighbors from {points} points")]
    KExceedsPoints { k: usize, points: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channels {channels} not divisible by {groups} groups")]
    GroupIndivisible { channels: usize, groups: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("sgp layer needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("weights incompatible with config: {0}")]
    IncompatibleWeights(String),
    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
    #[error("tensor name mismatch: {0}")]
    NameMismatch(String),
    #[error("bad file format: {0}")]
    Format(String),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("split needs at least two distinct contents: {0}")]
    EmptyContent(String),
    #[error("content {0} appears in both train and test")]
    LeakingSplit(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("metric undefined for constant input")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no pairs to report")]
    EmptyPairs,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
