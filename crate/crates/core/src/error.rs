use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor dims {0:?}")]
    InvalidDims(Vec<usize>),

    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },

    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward seed must be a scalar, node has dims {0:?}")]
    SeedNotScalar(Vec<usize>),

    #[error("forward has not been run for node {0}")]
    ForwardNotRun(usize),

    #[error("leaf node {0} has no bound value")]
    UnboundLeaf(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate Markov specification: {0}")]
    DegenerateSpec(String),

    #[error("zero-probability event: {0}")]
    ZeroProbability(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid UTF-8 on line {line}")]
    Utf8 { path: PathBuf, line: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("tensor '{name}' has dims {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
