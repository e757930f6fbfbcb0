use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("truncated buffer: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("malformed image: {0}")]
    Malformed(String),

    #[error("unknown region {0}")]
    UnknownRegion(u32),

    #[error("access out of bounds: region {region} offset {offset} len {len} (size {size})")]
    OutOfBounds {
        region: u32,
        offset: u64,
        len: u64,
        size: u64,
    },

    #[error("doorbell batch of {got} operations exceeds max batch {max}")]
    BatchTooLarge { got: usize, max: usize },

    #[error("injected fault on region {0}")]
    InjectedFault(u32),

    #[error("region too small: need {required} bytes, have {available}")]
    RegionTooSmall { required: u64, available: u64 },

    #[error("layout inconsistency: {0}")]
    Inconsistent(String),

    #[error("operation not allowed in phase {0}")]
    WrongPhase(&'static str),

    #[error("unknown worker {0}")]
    UnknownWorker(u32),

    #[error("transport: {0}")]
    Transport(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
