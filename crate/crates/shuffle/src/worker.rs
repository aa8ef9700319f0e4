//! Transport-independent worker state: tuple production into per-node
//! chunks, outgoing queues with a bounded depth, and incoming frame parsing.

use std::collections::VecDeque;
use std::io;
use std::net::TcpStream;
use std::ops::Range;

use crate::morsel::MorselSource;
use crate::tuple::{fill, key_at, partition_of, Checksum};
use crate::wire::{decode_chunk, seal, ChunkMeta, Header, FLAG_EOS, HEADER_LEN};
use crate::{ShuffleConfig, ShuffleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Produce {
    /// Generated tuples and may continue right away.
    Progress,
    /// A full chunk waits for room in its connection's queue.
    Stalled,
    /// All input consumed and every end-of-stream chunk queued.
    Finished,
}

#[derive(Debug)]
pub(crate) struct Peer {
    pub node: usize,
    pub sock: TcpStream,
    /// Sealed frames; the front one may be partly sent.
    pub queue: VecDeque<Vec<u8>>,
    pub sent_off: usize,
    pub send_in_flight: bool,
    pub recv_armed: bool,
    pub eos_received: bool,
    rx: Vec<u8>,
    rx_start: usize,
    pub egress: u64,
    pub ingress: u64,
}

impl Peer {
    pub fn front(&self) -> Option<&[u8]> {
        self.queue.front().map(|f| &f[self.sent_off..])
    }

    /// Space for at least `want` more received bytes.
    pub fn rx_spare(&mut self, want: usize) -> &mut [std::mem::MaybeUninit<u8>] {
        if self.rx_start > 0 {
            self.rx.drain(..self.rx_start);
            self.rx_start = 0;
        }
        self.rx.reserve(want);
        self.rx.spare_capacity_mut()
    }

    /// Marks `n` bytes of the spare space as received.
    ///
    /// # Safety
    ///
    /// The first `n` bytes past the current length must have been written.
    pub unsafe fn rx_commit(&mut self, n: usize) {
        self.rx.set_len(self.rx.len() + n);
        self.ingress += n as u64;
    }

    pub fn rx_extend(&mut self, b: &[u8]) {
        self.rx.extend_from_slice(b);
        self.ingress += b.len() as u64;
    }

    /// Records a completed (possibly short) send of `n` bytes and returns a
    /// frame that is no longer needed.
    pub fn sent(&mut self, n: usize) -> Option<Vec<u8>> {
        self.sent_off += n;
        self.egress += n as u64;
        let done = self.queue.front().is_some_and(|f| self.sent_off == f.len());
        if done {
            self.sent_off = 0;
            self.queue.pop_front()
        } else {
            None
        }
    }

    fn idle(&self) -> bool {
        self.queue.is_empty() && !self.send_in_flight && self.eos_received && !self.recv_armed
    }
}

#[derive(Debug, Default)]
pub struct WorkerOutput {
    /// Tuples produced for each destination node, this one included.
    pub sent: Vec<Checksum>,
    /// Tuples received from each source node, this one included.
    pub received: Vec<Checksum>,
    pub egress: Vec<u64>,
    pub ingress: Vec<u64>,
    pub chunks_sent: u64,
    pub stalls: u64,
    /// Received payloads, kept when a probe table is built.
    pub stored: Vec<Vec<u8>>,
}

pub(crate) struct Worker<'a> {
    pub cfg: &'a ShuffleConfig,
    pub id: usize,
    morsels: &'a MorselSource,
    cursor: Range<u64>,
    input_done: bool,
    eos_queued: bool,
    stalled: bool,
    /// Frame under construction per destination, header space included.
    builders: Vec<Vec<u8>>,
    pub peers: Vec<Option<Peer>>,
    out: WorkerOutput,
    free: Vec<Vec<u8>>,
    scratch: Vec<u8>,
    local: Vec<u8>,
}

impl<'a> Worker<'a> {
    pub fn new(
        cfg: &'a ShuffleConfig,
        id: usize,
        morsels: &'a MorselSource,
        socks: Vec<Option<TcpStream>>,
    ) -> Worker<'a> {
        let peers = socks
            .into_iter()
            .enumerate()
            .map(|(node, s)| {
                s.map(|sock| Peer {
                    node,
                    sock,
                    queue: VecDeque::new(),
                    sent_off: 0,
                    send_in_flight: false,
                    recv_armed: false,
                    eos_received: false,
                    rx: Vec::new(),
                    rx_start: 0,
                    egress: 0,
                    ingress: 0,
                })
            })
            .collect();
        Worker {
            cfg,
            id,
            morsels,
            cursor: 0..0,
            input_done: false,
            eos_queued: false,
            stalled: false,
            builders: (0..cfg.nodes).map(|_| Vec::new()).collect(),
            peers,
            out: WorkerOutput {
                sent: vec![Checksum::default(); cfg.nodes],
                received: vec![Checksum::default(); cfg.nodes],
                ..WorkerOutput::default()
            },
            free: Vec::new(),
            scratch: vec![0; cfg.tuple_width],
            local: Vec::new(),
        }
    }

    fn frame_len(&self) -> usize {
        HEADER_LEN + self.cfg.tuples_per_chunk() * self.cfg.tuple_width
    }

    fn fresh_frame(&mut self) -> Vec<u8> {
        let mut f = self.free.pop().unwrap_or_else(|| Vec::with_capacity(self.frame_len()));
        f.clear();
        f.resize(HEADER_LEN, 0);
        f
    }

    pub fn recycle(&mut self, mut frame: Vec<u8>) {
        if frame.capacity() >= self.frame_len() && self.free.len() < 2 * self.cfg.max_inflight {
            frame.clear();
            self.free.push(frame);
        }
    }

    /// Seals the builder for `dest` into its peer's queue unless the queue is full.
    fn push_builder(&mut self, dest: usize) -> bool {
        let peer = self.peers[dest].as_ref().expect("remote destination without a socket");
        if peer.queue.len() >= self.cfg.max_inflight {
            return false;
        }
        let fresh = self.fresh_frame();
        let mut frame = std::mem::replace(&mut self.builders[dest], fresh);
        let tuples = ((frame.len() - HEADER_LEN) / self.cfg.tuple_width) as u32;
        seal(&mut frame, self.meta(dest, tuples, 0));
        self.out.chunks_sent += 1;
        self.peers[dest].as_mut().unwrap().queue.push_back(frame);
        true
    }

    fn meta(&self, dest: usize, tuple_count: u32, flags: u16) -> ChunkMeta {
        ChunkMeta {
            flags,
            source_node: self.cfg.node_id as u16,
            partition: dest as u16,
            tuple_count,
        }
    }

    /// Generates up to `budget` tuples.
    pub fn produce(&mut self, budget: usize) -> Produce {
        if self.eos_queued {
            return Produce::Finished;
        }
        let me = self.cfg.node_id;
        let width = self.cfg.tuple_width;
        let full = self.frame_len();
        for _ in 0..budget {
            if self.cursor.is_empty() {
                match self.morsels.next() {
                    Some(m) => self.cursor = m.range(),
                    None => {
                        self.input_done = true;
                        break;
                    }
                }
            }
            let i = self.cursor.start;
            let key = key_at(self.cfg.seed, me, i);
            let dest = partition_of(key, self.cfg.nodes);
            if dest != me {
                if self.builders[dest].len() < HEADER_LEN {
                    self.builders[dest] = self.fresh_frame();
                }
                if self.builders[dest].len() + width > full && !self.push_builder(dest) {
                    if !self.stalled {
                        self.out.stalls += 1;
                    }
                    self.stalled = true;
                    return Produce::Stalled;
                }
            }
            self.stalled = false;
            fill(key, &mut self.scratch);
            self.out.sent[dest].add(&self.scratch);
            if dest == me {
                self.out.received[me].add(&self.scratch);
                if self.cfg.build_probe_table {
                    self.local.extend_from_slice(&self.scratch);
                    if self.local.len() + width > self.cfg.chunk_bytes {
                        self.out.stored.push(std::mem::take(&mut self.local));
                    }
                }
            } else {
                self.builders[dest].extend_from_slice(&self.scratch);
            }
            self.cursor.start += 1;
        }
        if !self.input_done {
            return Produce::Progress;
        }
        for dest in 0..self.cfg.nodes {
            if self.builders[dest].len() > HEADER_LEN && !self.push_builder(dest) {
                return Produce::Stalled;
            }
        }
        for dest in 0..self.cfg.nodes {
            if dest == me {
                continue;
            }
            let mut eos = vec![0u8; HEADER_LEN];
            seal(&mut eos, self.meta(dest, 0, FLAG_EOS));
            self.peers[dest].as_mut().unwrap().queue.push_back(eos);
        }
        if !self.local.is_empty() {
            self.out.stored.push(std::mem::take(&mut self.local));
        }
        self.eos_queued = true;
        Produce::Finished
    }

    /// Consumes every complete frame received from `node`.
    pub fn parse(&mut self, node: usize) -> Result<(), ShuffleError> {
        let cfg = self.cfg;
        let peer = self.peers[node].as_mut().unwrap();
        loop {
            let avail = &peer.rx[peer.rx_start..];
            if avail.len() < HEADER_LEN {
                break;
            }
            let h = Header::parse(avail)?;
            if h.payload_len as usize > cfg.chunk_bytes {
                return Err(ShuffleError::Protocol(format!(
                    "chunk of {} bytes from node {node} exceeds {}",
                    h.payload_len, cfg.chunk_bytes
                )));
            }
            if avail.len() < h.frame_len() {
                break;
            }
            let (meta, payload) = decode_chunk(&avail[..h.frame_len()], cfg.tuple_width)?;
            if peer.eos_received {
                return Err(ShuffleError::Protocol(format!("data after end of stream from node {node}")));
            }
            if meta.source_node as usize != node || meta.partition as usize != cfg.node_id {
                return Err(ShuffleError::Protocol(format!(
                    "chunk for partition {} from node {} on link to node {node}",
                    meta.partition, meta.source_node
                )));
            }
            self.out.received[node].add_all(payload, cfg.tuple_width);
            if cfg.build_probe_table && !payload.is_empty() {
                self.out.stored.push(payload.to_vec());
            }
            peer.eos_received |= meta.is_eos();
            peer.rx_start += h.frame_len();
        }
        if peer.rx_start == peer.rx.len() {
            peer.rx.clear();
            peer.rx_start = 0;
        }
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.eos_queued && self.peers.iter().flatten().all(Peer::idle)
    }

    pub fn into_output(mut self) -> WorkerOutput {
        self.out.egress = vec![0; self.cfg.nodes];
        self.out.ingress = vec![0; self.cfg.nodes];
        for p in self.peers.iter().flatten() {
            self.out.egress[p.node] = p.egress;
            self.out.ingress[p.node] = p.ingress;
        }
        self.out
    }
}

pub(crate) fn disconnected(peer: usize, e: io::Error) -> ShuffleError {
    match e.kind() {
        io::ErrorKind::ConnectionReset
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::UnexpectedEof => ShuffleError::PeerDisconnected { peer },
        _ => ShuffleError::Io(e),
    }
}
