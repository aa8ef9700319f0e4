use std::net::{SocketAddr, ToSocketAddrs};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::morsel::DEFAULT_MORSEL;
use crate::wire::HEADER_LEN;
use crate::ShuffleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetBackend {
    /// One I/O ring per worker thread.
    Ring,
    /// Nonblocking sockets driven by epoll.
    Readiness,
}

impl NetBackend {
    pub fn name(self) -> &'static str {
        match self {
            NetBackend::Ring => "ring",
            NetBackend::Readiness => "readiness",
        }
    }
}

impl FromStr for NetBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ring" | "uring" => Ok(NetBackend::Ring),
            "readiness" | "readiness-baseline" | "epoll" => Ok(NetBackend::Readiness),
            _ => Err(format!("unknown backend {s:?} (expected ring or readiness)")),
        }
    }
}

impl std::fmt::Display for NetBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub nodes: usize,
    pub node_id: usize,
    /// Listen address of every node, indexed by node id.
    pub peers: Vec<SocketAddr>,
    pub workers: usize,
    pub tuple_width: usize,
    /// Payload bytes per chunk.
    pub chunk_bytes: usize,
    /// Input bytes generated on each node.
    pub table_bytes: u64,
    pub backend: NetBackend,
    pub zero_copy_send: bool,
    pub zero_copy_recv: bool,
    pub multishot_recv: bool,
    pub poll_first: bool,
    pub build_probe_table: bool,
    pub seed: u64,
    pub morsel_tuples: u64,
    /// Queued chunks per connection before the producer stalls.
    pub max_inflight: usize,
    /// Worker `w` is pinned to `cpus[w % cpus.len()]`; empty leaves placement to the OS.
    pub cpus: Vec<usize>,
    /// Gives up when a node makes no network progress for this long.
    pub idle_timeout: Duration,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            nodes: 1,
            node_id: 0,
            peers: Vec::new(),
            workers: 1,
            tuple_width: 64,
            chunk_bytes: 1 << 20,
            table_bytes: 64 << 20,
            backend: NetBackend::Ring,
            zero_copy_send: false,
            zero_copy_recv: false,
            multishot_recv: false,
            poll_first: false,
            build_probe_table: false,
            seed: 42,
            morsel_tuples: DEFAULT_MORSEL,
            max_inflight: 4,
            cpus: Vec::new(),
            idle_timeout: Duration::from_secs(60),
        }
    }
}

impl ShuffleConfig {
    pub fn validate(&self) -> Result<(), ShuffleError> {
        let bad = |m: String| Err(ShuffleError::Config(m));
        if self.nodes == 0 || self.nodes > u16::MAX as usize {
            return bad(format!("nodes must be in 1..=65535, got {}", self.nodes));
        }
        if self.node_id >= self.nodes {
            return bad(format!("node_id {} out of range for {} nodes", self.node_id, self.nodes));
        }
        if self.nodes > 1 && self.peers.len() != self.nodes {
            return bad(format!("{} peer addresses for {} nodes", self.peers.len(), self.nodes));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(64..=4096).contains(&self.tuple_width) {
            return bad(format!("tuple_width {} outside 64..=4096", self.tuple_width));
        }
        if self.chunk_bytes < self.tuple_width || self.chunk_bytes > u32::MAX as usize - HEADER_LEN {
            return bad(format!(
                "chunk_bytes {} must lie between the tuple width and 4 GiB",
                self.chunk_bytes
            ));
        }
        if self.morsel_tuples == 0 || self.max_inflight == 0 {
            return bad("morsel size and in-flight chunk bound must be positive".into());
        }
        Ok(())
    }

    pub fn tuples_per_node(&self) -> u64 {
        self.table_bytes / self.tuple_width as u64
    }

    pub fn tuples_per_chunk(&self) -> usize {
        self.chunk_bytes / self.tuple_width
    }

    /// Fingerprint of every setting the nodes must agree on.
    pub fn digest(&self) -> u64 {
        let canon = format!(
            "{}|{:?}|{}|{}|{}|{}|{:?}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.nodes,
            self.peers,
            self.workers,
            self.tuple_width,
            self.chunk_bytes,
            self.table_bytes,
            self.backend,
            self.zero_copy_send,
            self.zero_copy_recv,
            self.multishot_recv,
            self.poll_first,
            self.build_probe_table,
            self.seed,
            self.morsel_tuples,
            self.max_inflight,
        );
        crate::tuple::digest(canon.as_bytes())
    }
}

/// Resolves `host:port` entries separated by commas.
pub fn parse_peers(s: &str) -> Result<Vec<SocketAddr>, ShuffleError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .ok_or_else(|| ShuffleError::Config(format!("cannot resolve peer {p:?}")))
        })
        .collect()
}
