use alloc::string::String;

/// Errors produced by the codec core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("depth {0} outside [1, 16]")]
    DepthOutOfRange(u32),
    #[error("occupancy symbol must be in [1, 255], got {0}")]
    InvalidSymbol(u32),
    #[error("octree structure: {0}")]
    Structure(String),
    #[error("context: {0}")]
    Context(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("model/layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("bitstream truncated while decoding node {node}")]
    Truncated { node: usize },
    #[error("stream integrity check failed at node {node}: {reason}")]
    Integrity { node: usize, reason: String },
    #[error("container: {0}")]
    Container(String),
    #[error("model hash does not match the stream header")]
    HashMismatch,
}

pub type Result<T> = core::result::Result<T, Error>;
