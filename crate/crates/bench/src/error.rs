use thiserror::Error;
use uring_engine::rt::RtError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("device {path} unavailable: {reason}")]
    DeviceUnavailable { path: String, reason: String },
    #[error("variant {variant} unsupported: {reason}")]
    VariantUnsupported { variant: String, reason: String },
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error(transparent)]
    Ring(#[from] RtError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Workload(#[from] uring_engine::workload::WorkloadError),
    #[error(transparent)]
    Shuffle(#[from] uring_shuffle::ShuffleError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
