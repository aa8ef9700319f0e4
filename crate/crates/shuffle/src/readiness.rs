//! Baseline worker event loop: nonblocking sockets and edge-triggered epoll.

use std::io::{self, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::time::Instant;

use crate::worker::{disconnected, Produce, Worker};
use crate::ShuffleError;

const PRODUCE_BUDGET: usize = 4096;
/// Bytes read from one socket before the loop moves on.
const READ_SLICE: usize = 4 << 20;

fn epoll() -> io::Result<OwnedFd> {
    let fd = unsafe { libc::epoll_create1(libc::EPOLL_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

fn watch(ep: &OwnedFd, fd: i32, node: usize) -> io::Result<()> {
    let mut ev = libc::epoll_event {
        events: (libc::EPOLLIN | libc::EPOLLOUT | libc::EPOLLRDHUP | libc::EPOLLET) as u32,
        u64: node as u64,
    };
    if unsafe { libc::epoll_ctl(ep.as_raw_fd(), libc::EPOLL_CTL_ADD, fd, &mut ev) } < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

pub(crate) fn drive(w: &mut Worker, notes: &mut Vec<String>) -> Result<(), ShuffleError> {
    let cfg = w.cfg;
    if w.id == 0 {
        for (on, flag) in [
            (cfg.zero_copy_send, "zero_copy_send"),
            (cfg.zero_copy_recv, "zero_copy_recv"),
            (cfg.multishot_recv, "multishot_recv"),
            (cfg.poll_first, "poll_first"),
        ] {
            if on {
                notes.push(format!("{flag} has no effect on the readiness backend"));
            }
        }
    }
    let ep = epoll()?;
    let mut readable = vec![false; cfg.nodes];
    let mut writable = vec![false; cfg.nodes];
    for p in w.peers.iter().flatten() {
        p.sock.set_nonblocking(true)?;
        watch(&ep, p.sock.as_raw_fd(), p.node)?;
        readable[p.node] = true;
        writable[p.node] = true;
    }
    let recv_len = cfg.chunk_bytes + crate::wire::HEADER_LEN;
    let mut events = vec![libc::epoll_event { events: 0, u64: 0 }; 64];
    let mut last_progress = Instant::now();
    loop {
        let state = w.produce(PRODUCE_BUDGET);
        let mut moved = state == Produce::Progress;
        for node in 0..cfg.nodes {
            if writable[node] {
                moved |= flush(w, node, &mut writable[node])?;
            }
            if readable[node] {
                moved |= drain(w, node, recv_len, &mut readable[node])?;
            }
        }
        if w.done() {
            return Ok(());
        }
        if moved {
            last_progress = Instant::now();
        } else if last_progress.elapsed() > cfg.idle_timeout {
            return Err(ShuffleError::Timeout);
        }
        let timeout = if state == Produce::Progress { 0 } else { 100 };
        let n = unsafe {
            libc::epoll_wait(ep.as_raw_fd(), events.as_mut_ptr(), events.len() as i32, timeout)
        };
        if n < 0 {
            let e = io::Error::last_os_error();
            if e.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(e.into());
        }
        for ev in &events[..n as usize] {
            let node = ev.u64 as usize;
            let bits = ev.events as i32;
            if bits & (libc::EPOLLIN | libc::EPOLLRDHUP | libc::EPOLLHUP | libc::EPOLLERR) != 0 {
                readable[node] = true;
            }
            if bits & (libc::EPOLLOUT | libc::EPOLLHUP | libc::EPOLLERR) != 0 {
                writable[node] = true;
            }
        }
    }
}

/// Writes queued frames until the socket pushes back.
fn flush(w: &mut Worker, node: usize, writable: &mut bool) -> Result<bool, ShuffleError> {
    let mut moved = false;
    loop {
        let p = w.peers[node].as_mut().unwrap();
        let Some(f) = p.front() else { return Ok(moved) };
        match (&p.sock).write(f) {
            Ok(n) => {
                moved = true;
                if let Some(f) = p.sent(n) {
                    w.recycle(f);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                *writable = false;
                return Ok(moved);
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(disconnected(node, e)),
        }
    }
}

/// Reads and parses until the socket is empty or a slice is used up.
fn drain(w: &mut Worker, node: usize, recv_len: usize, readable: &mut bool) -> Result<bool, ShuffleError> {
    let mut total = 0;
    while total < READ_SLICE {
        let p = w.peers[node].as_mut().unwrap();
        if p.eos_received {
            *readable = false;
            break;
        }
        let fd = p.sock.as_raw_fd();
        let spare = p.rx_spare(recv_len);
        let n = unsafe { libc::recv(fd, spare.as_mut_ptr().cast(), spare.len(), 0) };
        if n < 0 {
            let e = io::Error::last_os_error();
            match e.kind() {
                io::ErrorKind::WouldBlock => {
                    *readable = false;
                    break;
                }
                io::ErrorKind::Interrupted => continue,
                _ => return Err(disconnected(node, e)),
            }
        }
        if n == 0 {
            return Err(ShuffleError::PeerDisconnected { peer: node });
        }
        // SAFETY: recv wrote `n` bytes into the spare space.
        unsafe { p.rx_commit(n as usize) };
        total += n as usize;
        w.parse(node)?;
    }
    Ok(total > 0)
}
