//! All-to-all tuple shuffle over TCP.
//!
//! Each node generates its share of the input in morsels, routes every tuple
//! to the node owning its partition and verifies delivery with
//! order-independent checksums exchanged over a control channel. Workers
//! drive their sockets either through a thread-local I/O ring or through a
//! readiness-based baseline.

mod config;
pub mod mesh;
pub mod morsel;
mod readiness;
mod ring;
mod run;
pub mod table;
pub mod tuple;
pub mod wire;
mod worker;

use thiserror::Error;

pub use config::{parse_peers, NetBackend, ShuffleConfig};
pub use run::{shuffle_run, shuffle_run_on, BuiltTable, ShuffleOutput, ShuffleReport};
pub use table::{ProbeTable, TableError, TableShard};
pub use tuple::{partition_of, Checksum};
pub use wire::{decode_chunk, encode_chunk, ChunkMeta, WireError};

#[derive(Debug, Error)]
pub enum ShuffleError {
    #[error("invalid shuffle config: {0}")]
    Config(String),
    #[error("node {peer} runs with a different configuration")]
    ConfigMismatch { peer: usize },
    #[error("node {peer} is unreachable")]
    PeerUnreachable { peer: usize },
    #[error("node {peer} disconnected")]
    PeerDisconnected { peer: usize },
    #[error(
        "partition {partition} received {received:?} from node {source_node}, which sent {expected:?}"
    )]
    ChecksumMismatch {
        source_node: usize,
        partition: usize,
        expected: Checksum,
        received: Checksum,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("no progress within the idle timeout")]
    Timeout,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Ring(#[from] uring_engine::rt::RtError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
