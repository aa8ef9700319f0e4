//! Network microbenchmarks over loopback or a remote echo peer.

use std::fmt;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use uring_engine::bufmgr::AlignedPage;
use uring_engine::cycles;
use uring_engine::rt::{
    Backend, Buf, FileDesc, IoCompletion, IoRequest, IoStatus, ReqFlags, RingConfig, RingHandle, RtError, Target,
};

use crate::error::{BenchError, Result};
use crate::rows::Rows;
use crate::util::{cpu_cycles, cycles_to_us, is_unsupported, thread_cpu};

const GROUP: u16 = 1;
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Tcp,
    Udp,
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tcp" => Ok(Transport::Tcp),
            "udp" => Ok(Transport::Udp),
            _ => Err(format!("expected tcp or udp, got `{s}`")),
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Poller {
    DeferTr,
    Sqpoll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extra {
    None,
    RegFiles,
    /// Receives land in a kernel-provided buffer ring.
    RegBufs,
    Napi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PingMode {
    pub poller: Poller,
    pub extra: Extra,
}

impl PingMode {
    pub fn all() -> Vec<PingMode> {
        let mut v = Vec::new();
        for poller in [Poller::DeferTr, Poller::Sqpoll] {
            for extra in [Extra::None, Extra::RegFiles, Extra::RegBufs, Extra::Napi] {
                v.push(PingMode { poller, extra });
            }
        }
        v
    }
}

impl fmt::Display for PingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.poller {
            Poller::DeferTr => "defer-tr",
            Poller::Sqpoll => "sqpoll",
        })?;
        f.write_str(match self.extra {
            Extra::None => "",
            Extra::RegFiles => "+reg-files",
            Extra::RegBufs => "+reg-bufs",
            Extra::Napi => "+napi",
        })
    }
}

impl FromStr for PingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PingMode::all()
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown ping-pong mode `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct PingpongConfig {
    pub transport: Transport,
    pub modes: Vec<PingMode>,
    pub msg_bytes: usize,
    pub exchanges: usize,
    pub warmup: usize,
    pub napi_busy_poll_us: u32,
    /// Remote echo server; a loopback one is started when absent.
    pub peer: Option<SocketAddr>,
}

impl Default for PingpongConfig {
    fn default() -> Self {
        PingpongConfig {
            transport: Transport::Tcp,
            modes: PingMode::all(),
            msg_bytes: 8,
            exchanges: 10_000,
            warmup: 100,
            napi_busy_poll_us: 50,
            peer: None,
        }
    }
}

/// Echo server on loopback; stops when dropped.
pub struct EchoServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl EchoServer {
    pub fn start(transport: Transport) -> Result<EchoServer> {
        EchoServer::bind(transport, "127.0.0.1:0".parse().expect("loopback"))
    }

    pub fn bind(transport: Transport, at: SocketAddr) -> Result<EchoServer> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let (addr, handle) = match transport {
            Transport::Tcp => {
                let l = TcpListener::bind(at)?;
                let addr = l.local_addr()?;
                let h = std::thread::spawn(move || {
                    for conn in l.incoming() {
                        if flag.load(Ordering::Relaxed) {
                            break;
                        }
                        let Ok(mut s) = conn else { continue };
                        let _ = s.set_nodelay(true);
                        std::thread::spawn(move || {
                            let mut buf = vec![0u8; 64 << 10];
                            while let Ok(n) = s.read(&mut buf) {
                                if n == 0 || s.write_all(&buf[..n]).is_err() {
                                    break;
                                }
                            }
                        });
                    }
                });
                (addr, h)
            }
            Transport::Udp => {
                let sock = UdpSocket::bind(at)?;
                sock.set_read_timeout(Some(Duration::from_millis(50)))?;
                let addr = sock.local_addr()?;
                let h = std::thread::spawn(move || {
                    let mut buf = vec![0u8; 65536];
                    while !flag.load(Ordering::Relaxed) {
                        if let Ok((n, from)) = sock.recv_from(&mut buf) {
                            let _ = sock.send_to(&buf[..n], from);
                        }
                    }
                });
                (addr, h)
            }
        };
        Ok(EchoServer {
            addr,
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Wake a blocked accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(100));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

enum Client {
    Tcp(TcpStream),
    Udp(UdpSocket),
}

impl Client {
    fn connect(transport: Transport, peer: SocketAddr) -> Result<Client> {
        let unreachable = |e: std::io::Error| BenchError::PeerUnreachable(format!("{peer}: {e}"));
        Ok(match transport {
            Transport::Tcp => {
                let s = TcpStream::connect_timeout(&peer, IO_TIMEOUT).map_err(unreachable)?;
                s.set_nodelay(true)?;
                Client::Tcp(s)
            }
            Transport::Udp => {
                let s = UdpSocket::bind(if peer.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" })?;
                s.connect(peer).map_err(unreachable)?;
                Client::Udp(s)
            }
        })
    }

    fn desc(&self) -> FileDesc {
        match self {
            Client::Tcp(s) => FileDesc::socket(s),
            Client::Udp(s) => FileDesc::socket(s),
        }
    }
}

fn payload(seq: u64, out: &mut [u8]) {
    let mut x = seq.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bd1_e995;
    for b in out.iter_mut() {
        x ^= x >> 29;
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        *b = (x >> 56) as u8;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PingResult {
    pub median_rtt_us: f64,
    pub payload_crc: u32,
    pub mismatches: usize,
}

fn ping_ring(mode: PingMode, napi_us: u32) -> RingConfig {
    let mut cfg = match mode.poller {
        Poller::DeferTr => RingConfig::default(),
        Poller::Sqpoll => RingConfig::with_backend(Backend::UringSqpoll),
    };
    cfg.sq_depth = 16;
    if mode.extra == Extra::Napi {
        cfg.napi_busy_poll_us = napi_us;
    }
    cfg
}

/// Runs `exchanges` round trips in one mode against `peer`.
pub fn pingpong_mode(cfg: &PingpongConfig, mode: PingMode, peer: SocketAddr) -> Result<PingResult> {
    let client = Client::connect(cfg.transport, peer)?;
    let mut ring = RingHandle::new(&ping_ring(mode, cfg.napi_busy_poll_us))?;
    let target = if mode.extra == Extra::RegFiles {
        ring.register_files(&[client.desc()])?;
        Target::Fixed(0)
    } else {
        Target::Fd(client.desc())
    };
    let n = cfg.msg_bytes;
    if mode.extra == Extra::RegBufs {
        ring.setup_buf_ring(GROUP, 16, n.max(64) as u32)?;
    }
    let mut out = vec![0u8; n];
    let mut back = vec![0u8; n];
    let mut rtts = Vec::with_capacity(cfg.exchanges);
    let mut crc = 0u32;
    let mut mismatches = 0;
    let mut done: Vec<IoCompletion> = Vec::with_capacity(4);
    for seq in 0..(cfg.warmup + cfg.exchanges) as u64 {
        payload(seq, &mut out);
        let t0 = cycles::now();
        let send = IoRequest::send(target, Buf::from_ref(&out)).tag(u64::MAX);
        // SAFETY: `out` is not touched until the send completes below.
        unsafe { ring.enqueue(send) }?;
        let mut got = 0;
        let mut sent = false;
        let mut recv_armed = false;
        while got < n || !sent {
            if got < n && !recv_armed {
                let req = if mode.extra == Extra::RegBufs {
                    IoRequest {
                        flags: ReqFlags {
                            provided_buffers: true,
                            ..ReqFlags::default()
                        },
                        ..IoRequest::recv(target, Buf::Group { group: GROUP, len: (n - got) as u32 })
                    }
                } else {
                    IoRequest::recv(target, Buf::from_slice(&mut back[got..]))
                };
                // SAFETY: `back` outlives the receive, which is reaped in this loop.
                unsafe { ring.enqueue(req.tag(got as u64)) }?;
                recv_armed = true;
            }
            ring.submit()?;
            done.clear();
            ring.reap_into(&mut done, 1, 4, Some(IO_TIMEOUT))?;
            for c in &done {
                if c.tag == u64::MAX {
                    if c.into_result()? as usize != n {
                        return Err(BenchError::BackendFailure("short send".into()));
                    }
                    sent = true;
                    continue;
                }
                recv_armed = false;
                let r = match c.status {
                    IoStatus::Ok => c.bytes as usize,
                    IoStatus::Error(e) => return Err(std::io::Error::from_raw_os_error(e).into()),
                };
                if r == 0 {
                    return Err(BenchError::PeerUnreachable(format!("{peer} closed the connection")));
                }
                if let Some(bid) = c.buffer_id {
                    let data = ring.provided_buffer(GROUP, bid, r).expect("provided buffer");
                    back[got..got + r].copy_from_slice(data);
                    ring.recycle_buffer(GROUP, bid);
                }
                got += r;
            }
        }
        let t1 = cycles::now();
        if seq >= cfg.warmup as u64 {
            rtts.push(cycles_to_us(t1 - t0));
            crc = crc32c::crc32c_append(crc, &back);
            mismatches += usize::from(back != out);
        }
    }
    if let Client::Tcp(s) = &client {
        let _ = s.shutdown(Shutdown::Both);
    }
    Ok(PingResult {
        median_rtt_us: cycles::median(&mut rtts),
        payload_crc: crc,
        mismatches,
    })
}

pub fn bench_pingpong(cfg: &PingpongConfig, rows: &mut Rows) -> Result<()> {
    if cfg.msg_bytes == 0 || cfg.exchanges == 0 {
        return Err(BenchError::Config("msg_bytes and exchanges must be positive".into()));
    }
    if cfg.transport == Transport::Udp && cfg.msg_bytes > 65507 {
        return Err(BenchError::Config("udp messages are limited to 65507 bytes".into()));
    }
    let local = match cfg.peer {
        Some(_) => None,
        None => Some(EchoServer::start(cfg.transport)?),
    };
    let peer = cfg.peer.unwrap_or_else(|| local.as_ref().expect("local echo").addr);
    let bench = format!("pingpong-{}", cfg.transport);
    for &mode in &cfg.modes {
        let variant = mode.to_string();
        match pingpong_mode(cfg, mode, peer) {
            Ok(r) => {
                if r.mismatches > 0 {
                    return Err(BenchError::BackendFailure(format!(
                        "{variant}: {} echoes differ from the payload sent",
                        r.mismatches
                    )));
                }
                rows.num(&bench, &variant, cfg.msg_bytes, "rtt_us", r.median_rtt_us);
                rows.num(&bench, &variant, cfg.msg_bytes, "payload_crc32c", r.payload_crc as f64);
            }
            Err(BenchError::Ring(e)) if is_unsupported(&e) => {
                rows.skip(&bench, &variant, cfg.msg_bytes, "rtt_us", format!("unsupported: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Message-size sweep.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgPath {
    Send,
    Recv,
}

impl MsgPath {
    /// Baseline and candidate variant names.
    pub fn variants(self) -> [&'static str; 2] {
        match self {
            MsgPath::Send => ["copy", "zero-copy"],
            MsgPath::Recv => ["multishot", "single-shot"],
        }
    }

    fn bench(self) -> &'static str {
        match self {
            MsgPath::Send => "msgsize-send",
            MsgPath::Recv => "msgsize-recv",
        }
    }
}

impl FromStr for MsgPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "send" => Ok(MsgPath::Send),
            "recv" => Ok(MsgPath::Recv),
            _ => Err(format!("expected send or recv, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MsgsizeConfig {
    pub path: MsgPath,
    pub msg_sizes: Vec<usize>,
    pub bytes_per_point: u64,
    pub min_messages: usize,
    /// Interleaved repetitions of each (size, variant) pair.
    pub reps: usize,
    /// Sends kept in flight.
    pub depth: usize,
}

impl Default for MsgsizeConfig {
    fn default() -> Self {
        MsgsizeConfig {
            path: MsgPath::Send,
            msg_sizes: vec![64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536],
            bytes_per_point: 64 << 20,
            min_messages: 4096,
            reps: 5,
            depth: 8,
        }
    }
}

/// The smallest swept size from which the candidate stays cheaper than the
/// baseline (ratio below one), provided it was not already cheaper at the
/// smallest size.
pub fn detect_crossover(sizes: &[usize], ratios: &[f64]) -> Option<usize> {
    let tail = ratios.iter().rev().take_while(|&&r| r < 1.0).count();
    let first = ratios.len() - tail;
    (tail > 0 && first > 0).then(|| sizes[first])
}

fn loopback_pair() -> Result<(TcpStream, TcpStream)> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let a = TcpStream::connect(l.local_addr()?)?;
    let (b, _) = l.accept()?;
    a.set_nodelay(true)?;
    b.set_nodelay(true)?;
    Ok((a, b))
}

fn drain(mut s: TcpStream) -> std::thread::JoinHandle<u64> {
    std::thread::spawn(move || {
        let mut buf = vec![0u8; 1 << 20];
        let mut total = 0u64;
        while let Ok(n) = s.read(&mut buf) {
            if n == 0 {
                break;
            }
            total += n as u64;
        }
        total
    })
}

/// Sender CPU cycles per byte for `count` messages of `size` bytes.
fn send_cost(size: usize, count: usize, zero_copy: bool, depth: usize) -> Result<f64> {
    let (tx, rx) = loopback_pair()?;
    let sink = drain(rx);
    let mut ring = RingHandle::new(&RingConfig::default().depth((depth * 2) as u32))?;
    let mut arena = AlignedPage::new(depth * size);
    for (i, b) in arena.as_mut().iter_mut().enumerate() {
        *b = i as u8;
    }
    let base = arena.as_mut().as_mut_ptr();
    let desc = FileDesc::socket(&tx);
    let mut sent_in_slot = vec![0usize; depth];
    let mut issued = 0;
    let mut finished = 0;
    let mut done: Vec<IoCompletion> = Vec::with_capacity(depth * 2);
    let stage = |ring: &mut RingHandle, slot: usize, from: usize| -> Result<(), RtError> {
        // SAFETY: inside `arena`; the slot is not reused until its send completes.
        let buf = Buf::Raw { ptr: unsafe { base.add(slot * size + from) }, len: size - from };
        let req = IoRequest::send(desc, buf).zero_copy(zero_copy).tag(slot as u64);
        // SAFETY: see above.
        unsafe { ring.enqueue(req) }.map(drop)
    };
    let c0 = thread_cpu();
    for slot in 0..depth.min(count) {
        stage(&mut ring, slot, 0)?;
        issued += 1;
    }
    while finished < count {
        ring.submit()?;
        done.clear();
        ring.reap_into(&mut done, 1, depth * 2, Some(IO_TIMEOUT))?;
        for c in &done {
            let slot = c.tag as usize;
            sent_in_slot[slot] += c.into_result()? as usize;
            if sent_in_slot[slot] < size {
                stage(&mut ring, slot, sent_in_slot[slot])?;
                continue;
            }
            sent_in_slot[slot] = 0;
            finished += 1;
            if issued < count {
                stage(&mut ring, slot, 0)?;
                issued += 1;
            }
        }
    }
    let cpu = thread_cpu() - c0;
    drop(ring);
    tx.shutdown(Shutdown::Write)?;
    let received = sink.join().expect("sink panicked");
    let total = (size * count) as u64;
    if received != total {
        return Err(BenchError::BackendFailure(format!("sink received {received} of {total} bytes")));
    }
    Ok(cpu_cycles(cpu) / total as f64)
}

/// Receiver CPU cycles per byte for `count` messages of `size` bytes.
fn recv_cost(size: usize, count: usize, multishot: bool) -> Result<f64> {
    let (tx, rx) = loopback_pair()?;
    let total = (size * count) as u64;
    let source = std::thread::spawn(move || -> std::io::Result<()> {
        let mut tx = tx;
        let msg = vec![0x42u8; size];
        for _ in 0..count {
            tx.write_all(&msg)?;
        }
        tx.shutdown(Shutdown::Write)
    });
    let mut ring = RingHandle::new(&RingConfig::default().depth(8))?;
    let entries = ((64usize << 20) / size).clamp(4, 256).next_power_of_two().min(256) as u16;
    if multishot {
        ring.setup_buf_ring(GROUP, entries, size as u32)?;
    }
    let desc = FileDesc::socket(&rx);
    let mut buf = vec![0u8; size];
    let mut got = 0u64;
    let mut armed = false;
    let mut eof = false;
    let mut done: Vec<IoCompletion> = Vec::with_capacity(64);
    let c0 = thread_cpu();
    while got < total && !eof {
        if !armed {
            let req = if multishot {
                IoRequest {
                    flags: ReqFlags {
                        multishot: true,
                        provided_buffers: true,
                        ..ReqFlags::default()
                    },
                    ..IoRequest::recv(desc, Buf::Group { group: GROUP, len: 0 })
                }
            } else {
                IoRequest::recv(desc, Buf::from_slice(&mut buf))
            };
            // SAFETY: `buf` outlives the receive, which is reaped below.
            unsafe { ring.enqueue(req) }?;
            ring.submit()?;
            armed = true;
        }
        done.clear();
        ring.reap_into(&mut done, 1, 64, Some(IO_TIMEOUT))?;
        for c in &done {
            if !c.more_coming {
                armed = false;
            }
            match c.status {
                IoStatus::Ok if c.bytes == 0 => eof = true,
                IoStatus::Ok => got += c.bytes as u64,
                IoStatus::Error(libc::ENOBUFS) => {}
                IoStatus::Error(e) => return Err(std::io::Error::from_raw_os_error(e).into()),
            }
            if let Some(bid) = c.buffer_id {
                ring.recycle_buffer(GROUP, bid);
            }
        }
    }
    let cpu = thread_cpu() - c0;
    drop(ring);
    drop(rx);
    source.join().expect("source panicked")?;
    if got != total {
        return Err(BenchError::BackendFailure(format!("received {got} of {total} bytes")));
    }
    Ok(cpu_cycles(cpu) / total as f64)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub sizes: Vec<usize>,
    /// Median cycles per byte of the baseline and candidate at each size.
    pub baseline: Vec<f64>,
    pub candidate: Vec<f64>,
    /// Median of per-repetition candidate/baseline ratios.
    pub ratios: Vec<f64>,
    pub crossover: Option<usize>,
}

pub fn msgsize_sweep(cfg: &MsgsizeConfig) -> Result<SweepResult> {
    let mut res = SweepResult {
        sizes: cfg.msg_sizes.clone(),
        baseline: Vec::new(),
        candidate: Vec::new(),
        ratios: Vec::new(),
        crossover: None,
    };
    for &size in &cfg.msg_sizes {
        let count = ((cfg.bytes_per_point as usize) / size).max(cfg.min_messages);
        let run = |candidate: bool| match cfg.path {
            MsgPath::Send => send_cost(size, count, candidate, cfg.depth),
            MsgPath::Recv => recv_cost(size, count, !candidate),
        };
        let (mut b, mut c, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.reps {
            let base = run(false)?;
            let cand = run(true)?;
            b.push(base);
            c.push(cand);
            r.push(cand / base);
        }
        res.baseline.push(cycles::median(&mut b));
        res.candidate.push(cycles::median(&mut c));
        res.ratios.push(cycles::median(&mut r));
    }
    res.crossover = detect_crossover(&res.sizes, &res.ratios);
    Ok(res)
}

pub fn bench_msgsize(cfg: &MsgsizeConfig, rows: &mut Rows) -> Result<()> {
    if cfg.msg_sizes.contains(&0) || cfg.reps == 0 || cfg.depth == 0 {
        return Err(BenchError::Config("message sizes, reps and depth must be positive".into()));
    }
    let bench = cfg.path.bench();
    let [base, cand] = cfg.path.variants();
    let res = match msgsize_sweep(cfg) {
        Ok(r) => r,
        Err(BenchError::Ring(e)) if is_unsupported(&e) => {
            for &s in &cfg.msg_sizes {
                for v in [base, cand] {
                    rows.skip(bench, v, s, "cycles_per_byte", format!("unsupported: {e}"));
                }
            }
            rows.skip(bench, cand, "sweep", "crossover_bytes", format!("unsupported: {e}"));
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    for (i, &s) in res.sizes.iter().enumerate() {
        rows.num(bench, base, s, "cycles_per_byte", res.baseline[i]);
        rows.num(bench, cand, s, "cycles_per_byte", res.candidate[i]);
        rows.num(bench, &format!("{cand}/{base}"), s, "ratio", res.ratios[i]);
    }
    match res.crossover {
        Some(s) => rows.num(bench, cand, "sweep", "crossover_bytes", s as f64),
        None => {
            let why = if res.sizes.len() < 2 {
                "no crossover: single message size".to_string()
            } else if res.ratios.last().is_some_and(|&r| r < 1.0) {
                format!("no crossover: {cand} cheaper at every size")
            } else {
                format!("no crossover: {cand} not cheaper at the largest size")
            };
            rows.skip(bench, cand, "sweep", "crossover_bytes", why);
        }
    }
    Ok(())
}
