//! Connection setup and the out-of-band control channel.
//!
//! Every node listens on its own address. A node opens one control
//! connection and one data connection per worker to each node with a lower
//! id and accepts the same set from every node with a higher id. Each
//! connection starts with a length-prefixed JSON handshake carrying the
//! sender's config digest.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::tuple::Checksum;
use crate::{ShuffleConfig, ShuffleError};

const MAX_MESSAGE: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Control,
    Data { worker: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub channel: Channel,
    pub node: usize,
    pub digest: u64,
}

/// What a node tells each peer once its workers are done.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub from: usize,
    /// Tuples this node sent to the receiver's partition.
    pub sent: Checksum,
    pub egress_bytes: u64,
}

pub fn send_msg<T: Serialize>(s: &mut TcpStream, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    let mut frame = (body.len() as u32).to_le_bytes().to_vec();
    frame.extend_from_slice(&body);
    s.write_all(&frame)
}

pub fn recv_msg<T: DeserializeOwned>(s: &mut TcpStream) -> io::Result<T> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_MESSAGE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "control message too large"));
    }
    let mut body = vec![0u8; len as usize];
    s.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

/// Sockets to every other node; the entries for this node stay empty.
#[derive(Debug)]
pub struct Mesh {
    pub control: Vec<Option<TcpStream>>,
    /// `data[w][n]` connects worker `w` here to worker `w` on node `n`.
    pub data: Vec<Vec<Option<TcpStream>>>,
}

impl Mesh {
    fn empty(cfg: &ShuffleConfig) -> Mesh {
        Mesh {
            control: (0..cfg.nodes).map(|_| None).collect(),
            data: (0..cfg.workers)
                .map(|_| (0..cfg.nodes).map(|_| None).collect())
                .collect(),
        }
    }

    fn slot(&mut self, ch: Channel, node: usize) -> Option<&mut Option<TcpStream>> {
        match ch {
            Channel::Control => self.control.get_mut(node),
            Channel::Data { worker } => self.data.get_mut(worker)?.get_mut(node),
        }
    }

    fn place(&mut self, ch: Channel, node: usize, s: TcpStream) -> Result<(), ShuffleError> {
        match self.slot(ch, node) {
            Some(slot @ None) => {
                *slot = Some(s);
                Ok(())
            }
            _ => Err(ShuffleError::Protocol(format!(
                "unexpected or duplicate {ch:?} connection from node {node}"
            ))),
        }
    }
}

fn channels(cfg: &ShuffleConfig) -> impl Iterator<Item = Channel> {
    std::iter::once(Channel::Control).chain((0..cfg.workers).map(|w| Channel::Data { worker: w }))
}

fn connect_retry(cfg: &ShuffleConfig, node: usize, deadline: Instant) -> Result<TcpStream, ShuffleError> {
    loop {
        match TcpStream::connect_timeout(&cfg.peers[node], Duration::from_secs(1)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::trace!("connect to node {node}: {e}");
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => return Err(ShuffleError::PeerUnreachable { peer: node }),
        }
    }
}

fn check(cfg: &ShuffleConfig, theirs: &Hello, node: usize) -> Result<(), ShuffleError> {
    if theirs.digest != cfg.digest() {
        return Err(ShuffleError::ConfigMismatch { peer: node });
    }
    Ok(())
}

fn io_err(peer: usize) -> impl Fn(io::Error) -> ShuffleError {
    move |e| match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionAborted => ShuffleError::PeerDisconnected { peer },
        _ => ShuffleError::Io(e),
    }
}

/// Builds the full mesh for `cfg`, listening on `listener`.
pub fn connect(cfg: &ShuffleConfig, listener: &TcpListener) -> Result<Mesh, ShuffleError> {
    let me = cfg.node_id;
    let mut mesh = Mesh::empty(cfg);
    if cfg.nodes == 1 {
        return Ok(mesh);
    }
    let deadline = Instant::now() + cfg.idle_timeout;
    let inbound = (cfg.nodes - 1 - me) * (cfg.workers + 1);
    let abort = AtomicBool::new(false);
    let accepted = std::thread::scope(|s| {
        let acceptor = s.spawn(|| -> Result<Vec<(Hello, TcpStream)>, ShuffleError> {
            let mut got = Vec::new();
            listener.set_nonblocking(true)?;
            while got.len() < inbound {
                let mut sock = match listener.accept() {
                    Ok((sock, _)) => sock,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if abort.load(Ordering::Relaxed) {
                            return Err(ShuffleError::Protocol("setup aborted".into()));
                        }
                        if Instant::now() > deadline {
                            return Err(ShuffleError::Timeout);
                        }
                        std::thread::sleep(Duration::from_millis(5));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                sock.set_nonblocking(false)?;
                sock.set_read_timeout(Some(cfg.idle_timeout))?;
                let hello: Hello = recv_msg(&mut sock)?;
                send_msg(
                    &mut sock,
                    &Hello {
                        channel: hello.channel,
                        node: me,
                        digest: cfg.digest(),
                    },
                )?;
                if hello.node <= me || hello.node >= cfg.nodes {
                    return Err(ShuffleError::Protocol(format!(
                        "connection from node {} at node {me}",
                        hello.node
                    )));
                }
                check(cfg, &hello, hello.node)?;
                got.push((hello, sock));
            }
            Ok(got)
        });
        let mut outbound = Vec::new();
        let res = (|| {
            for node in 0..me {
                for ch in channels(cfg) {
                    let mut sock = connect_retry(cfg, node, deadline)?;
                    sock.set_read_timeout(Some(cfg.idle_timeout))?;
                    let err = io_err(node);
                    send_msg(
                        &mut sock,
                        &Hello {
                            channel: ch,
                            node: me,
                            digest: cfg.digest(),
                        },
                    )
                    .map_err(&err)?;
                    let reply: Hello = recv_msg(&mut sock).map_err(&err)?;
                    if reply.node != node || reply.channel != ch {
                        return Err(ShuffleError::Protocol(format!(
                            "node {node} answered as {reply:?}"
                        )));
                    }
                    check(cfg, &reply, node)?;
                    outbound.push((ch, node, sock));
                }
            }
            Ok(())
        })();
        if res.is_err() {
            abort.store(true, Ordering::Relaxed);
        }
        let acc = acceptor.join().expect("acceptor panicked");
        res.and(acc).map(|acc| (outbound, acc))
    });
    let (outbound, inbound) = accepted?;
    for (ch, node, s) in outbound {
        mesh.place(ch, node, s)?;
    }
    for (h, s) in inbound {
        mesh.place(h.channel, h.node, s)?;
    }
    for s in mesh.control.iter().chain(mesh.data.iter().flatten()).flatten() {
        s.set_nodelay(true)?;
        s.set_read_timeout(None)?;
    }
    Ok(mesh)
}

/// Sends `ours[n]` to every node `n` and returns what each peer sent here.
pub fn exchange(
    cfg: &ShuffleConfig,
    control: &mut [Option<TcpStream>],
    ours: &[Summary],
) -> Result<Vec<Option<Summary>>, ShuffleError> {
    for (n, s) in control.iter_mut().enumerate() {
        if let Some(s) = s {
            send_msg(s, &ours[n]).map_err(io_err(n))?;
        }
    }
    let mut theirs = vec![None; cfg.nodes];
    for (n, s) in control.iter_mut().enumerate() {
        if let Some(s) = s {
            s.set_read_timeout(Some(cfg.idle_timeout))?;
            let m: Summary = recv_msg(s).map_err(io_err(n))?;
            if m.from != n {
                return Err(ShuffleError::Protocol(format!("summary from node {} on link to {n}", m.from)));
            }
            theirs[n] = Some(m);
        }
    }
    Ok(theirs)
}
