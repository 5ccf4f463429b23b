use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor operations and the autodiff graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("batch-norm running statistics are uninitialized; run a train step first")]
    UninitializedRunningStats,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Invalid { op, detail: detail.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("input height {height} does not reduce to 2x2 through three 3x3/stride-3 pools ({trace})")]
    PoolClosure { height: usize, trace: String },
    #[error("input must be square with 3 channels, got {channels}x{height}x{width}")]
    InputShape { channels: usize, height: usize, width: usize },
    #[error("decoder does not close: 2*3*3*3 = 54 must equal input height {height}")]
    DecoderClosure { height: usize },
    #[error("embedding_dim {embedding_dim} must equal prediction-conv channels x 1 x 1 ({channels})")]
    Embedding { embedding_dim: usize, channels: usize },
    #[error("decoder_channels must end with 3 output channels, got {0:?}")]
    DecoderOutput(Vec<usize>),
    #[error("{field} must be {requirement}, got {value}")]
    OutOfRange { field: &'static str, requirement: &'static str, value: String },
    #[error("config line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {detail}")]
    Value { key: String, detail: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"RPAD\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("score set needs both labels, got {bona_fide} bona fide and {attack} attack")]
    SingleClass { bona_fide: usize, attack: usize },
    #[error("score for `{0}` is not finite")]
    NonFiniteScore(String),
    #[error("malformed score row {row}: {detail}")]
    Parse { row: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown factor level: {0}")]
    UnknownLevel(String),
    #[error("correlation r must lie in [0.5, 1], got {0}")]
    CorrelationOutOfRange(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("malformed PPM {path}: {detail}")]
    Ppm { path: PathBuf, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at step {step} ({phase} phase)")]
    NonFiniteLoss { step: usize, phase: &'static str, component: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
