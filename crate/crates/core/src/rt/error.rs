use std::io;

use thiserror::Error;

/// Errors raised by ring creation, staging, submission and reaping.
#[derive(Debug, Error)]
pub enum RtError {
    #[error("incompatible ring flags: {0}")]
    IncompatibleFlags(&'static str),
    #[error("backend unsupported by this host: {0}")]
    UnsupportedBackend(String),
    #[error("invalid queue depth {0}")]
    InvalidDepth(u32),
    #[error("submission queue full")]
    SqFull,
    #[error("misaligned direct I/O: offset {offset}, len {len}, block {block}")]
    Misaligned { offset: u64, len: usize, block: u32 },
    #[error("storage request of {len} bytes exceeds the {max} byte cap")]
    RequestTooLarge { len: usize, max: usize },
    #[error("registered buffer index {index} out of range ({registered} registered)")]
    BadBufferIndex { index: u32, registered: usize },
    #[error("registered file index {index} out of range ({registered} registered)")]
    BadFileIndex { index: u32, registered: usize },
    #[error("{kind} is not supported by the {backend} backend")]
    KindUnsupportedByBackend { kind: &'static str, backend: &'static str },
    #[error("invalid request flags: {0}")]
    InvalidFlags(&'static str),
    #[error("region {index} is not page aligned")]
    NotAligned { index: usize },
    #[error("regions {0} and {1} overlap")]
    Overlapping(usize, usize),
    #[error("too many buffer regions: {0}")]
    TooManyRegions(usize),
    #[error("too many files: {0}")]
    TooManyFiles(usize),
    #[error("timed out waiting for {wanted} completions ({got} available)")]
    TimedOut { wanted: usize, got: usize },
    #[error("backend failure: {0}")]
    BackendFailure(#[from] io::Error),
}

pub type Result<T, E = RtError> = std::result::Result<T, E>;
