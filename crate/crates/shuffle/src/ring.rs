//! Worker event loop on a thread-local I/O ring.

use std::os::fd::AsRawFd;
use std::time::{Duration, Instant};

use uring_engine::rt::{
    Buf, FileDesc, IoCompletion, IoRequest, IoStatus, ReqFlags, RingConfig, RingHandle, RtError,
};

use crate::worker::{disconnected, Produce, Worker};
use crate::ShuffleError;

const SEND: u64 = 0;
const RECV: u64 = 1;
const GROUP: u16 = 1;
const PROVIDED_BUFS: u16 = 64;
const PROVIDED_LEN: u32 = 64 << 10;
const PRODUCE_BUDGET: usize = 4096;

fn tag(node: usize, kind: u64) -> u64 {
    (node as u64) << 1 | kind
}

pub(crate) fn drive(w: &mut Worker, notes: &mut Vec<String>) -> Result<(), ShuffleError> {
    let cfg = w.cfg;
    let depth = (2 * cfg.nodes + 8) as u32;
    let mut ring = RingHandle::new(&RingConfig::default().depth(depth))?;
    if cfg.multishot_recv {
        ring.setup_buf_ring(GROUP, PROVIDED_BUFS, PROVIDED_LEN)?;
    }
    if cfg.zero_copy_recv && w.id == 0 {
        notes.push("zero-copy receive unsupported on this host; used copy receive".into());
    }
    let recv_len = cfg.chunk_bytes + crate::wire::HEADER_LEN;
    let mut done: Vec<IoCompletion> = Vec::new();
    let mut last_progress = Instant::now();
    loop {
        let state = w.produce(PRODUCE_BUDGET);
        for p in w.peers.iter_mut().flatten() {
            let fd = FileDesc::socket(&p.sock);
            if !p.send_in_flight {
                if let Some(f) = p.front() {
                    let req = IoRequest::send(fd, Buf::from_ref(f))
                        .zero_copy(cfg.zero_copy_send)
                        .poll_first(cfg.poll_first)
                        .tag(tag(p.node, SEND));
                    // SAFETY: the frame stays at the queue front until this send completes.
                    unsafe { ring.enqueue(req) }?;
                    p.send_in_flight = true;
                }
            }
            if !p.recv_armed && !p.eos_received {
                let req = if cfg.multishot_recv {
                    IoRequest {
                        flags: ReqFlags {
                            multishot: true,
                            provided_buffers: true,
                            poll_first: cfg.poll_first,
                            ..ReqFlags::default()
                        },
                        ..IoRequest::recv(fd, Buf::Group { group: GROUP, len: 0 })
                    }
                } else {
                    let spare = p.rx_spare(recv_len);
                    let buf = Buf::Raw {
                        ptr: spare.as_mut_ptr().cast(),
                        len: spare.len(),
                    };
                    IoRequest::recv(fd, buf).poll_first(cfg.poll_first)
                };
                // SAFETY: the receive buffer is left alone until the completion arrives.
                unsafe { ring.enqueue(req.tag(tag(p.node, RECV))) }?;
                p.recv_armed = true;
            }
        }
        if w.done() {
            return Ok(());
        }
        ring.submit()?;
        let wait = state != Produce::Progress;
        done.clear();
        let timeout = wait.then_some(Duration::from_millis(100));
        match ring.reap_into(&mut done, wait as usize, 256, timeout) {
            Ok(_) | Err(RtError::TimedOut { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        if !done.is_empty() || state == Produce::Progress {
            last_progress = Instant::now();
        } else if last_progress.elapsed() > cfg.idle_timeout {
            return Err(ShuffleError::Timeout);
        }
        for c in &done {
            complete(w, &mut ring, c)?;
        }
    }
}

fn complete(w: &mut Worker, ring: &mut RingHandle, c: &IoCompletion) -> Result<(), ShuffleError> {
    let node = (c.tag >> 1) as usize;
    let multishot = w.cfg.multishot_recv;
    let p = w.peers[node].as_mut().expect("completion for unknown peer");
    if c.tag & 1 == SEND {
        p.send_in_flight = false;
        let n = c.into_result().map_err(|e| disconnected(node, e))?;
        if let Some(f) = p.sent(n as usize) {
            w.recycle(f);
        }
        return Ok(());
    }
    if !c.more_coming {
        p.recv_armed = false;
    }
    match c.status {
        IoStatus::Ok if c.bytes == 0 => {
            if !p.eos_received {
                return Err(ShuffleError::PeerDisconnected { peer: node });
            }
        }
        IoStatus::Ok => {
            let n = c.bytes as usize;
            if multishot {
                let bid = c.buffer_id.expect("multishot receive without a buffer id");
                let data = ring.provided_buffer(GROUP, bid, n).expect("unknown provided buffer");
                p.rx_extend(data);
                ring.recycle_buffer(GROUP, bid);
            } else {
                // SAFETY: the kernel wrote `n` bytes into the spare space handed to the receive.
                unsafe { p.rx_commit(n) };
            }
            w.parse(node)?;
            let p = w.peers[node].as_mut().unwrap();
            if p.eos_received && p.recv_armed {
                // Nothing more will arrive; end the multishot receive locally.
                unsafe { libc::shutdown(p.sock.as_raw_fd(), libc::SHUT_RD) };
            }
        }
        IoStatus::Error(libc::ENOBUFS) if multishot => {}
        IoStatus::Error(_) if p.eos_received => {}
        IoStatus::Error(e) => return Err(disconnected(node, std::io::Error::from_raw_os_error(e))),
    }
    Ok(())
}
