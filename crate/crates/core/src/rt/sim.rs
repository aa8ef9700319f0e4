//! Deterministic simulated storage device.
//!
//! Requests occupy one of `max_inflight` parallel channels for their kind's
//! latency; excess requests wait in FIFO order for a free channel. Time is
//! virtual and only advances when a reap has to wait or when the caller
//! charges CPU work to the shared [`VirtualClock`]. Data movement is real:
//! reads and writes are applied to the target file with `pread`/`pwrite` at
//! the moment the completion becomes visible, in virtual-time order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::driver::Driver;
use super::error::{Result, RtError};
use super::request::{FileDesc, IoCompletion, IoKind, IoRequest};

/// Shared virtual time in nanoseconds.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock::default()
    }

    pub fn now_ns(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns())
    }

    pub fn advance(&self, d: Duration) {
        self.0.fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn advance_ns(&self, ns: u64) {
        self.0.fetch_add(ns, Ordering::Relaxed);
    }

    /// Moves time forward to `t_ns`; never moves it backwards.
    pub fn advance_to(&self, t_ns: u64) {
        self.0.fetch_max(t_ns, Ordering::Relaxed);
    }
}

/// Optional CPU cost charged to the virtual clock by the simulated ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimCpuModel {
    pub clock_hz: f64,
    /// Fixed cost of one submission call, paid once per non-empty submit.
    pub enter_cycles: u64,
    pub read_cycles: u64,
    pub write_cycles: u64,
}

impl SimCpuModel {
    pub fn cycles_to_ns(&self, cycles: u64) -> u64 {
        (cycles as f64 * 1e9 / self.clock_hz).round() as u64
    }
}

#[derive(Debug, Clone)]
pub struct SimDeviceConfig {
    pub read_latency: Duration,
    pub write_latency: Duration,
    /// Latency of fsync and flush commands.
    pub flush_latency: Duration,
    pub max_inflight: usize,
    pub clock: VirtualClock,
    pub cpu: Option<SimCpuModel>,
}

impl Default for SimDeviceConfig {
    fn default() -> Self {
        SimDeviceConfig {
            read_latency: Duration::from_micros(70),
            write_latency: Duration::from_micros(12),
            flush_latency: Duration::from_micros(12),
            max_inflight: 4096,
            clock: VirtualClock::new(),
            cpu: None,
        }
    }
}

#[derive(Debug)]
struct SimOp {
    tag: u64,
    kind: IoKind,
    fd: i32,
    offset: u64,
    ptr: usize,
    len: usize,
    timeout_ns: Option<u64>,
    /// Set once the op became runnable; used for link timeouts.
    ready_at: u64,
    /// Remaining linked requests that run after this one succeeds.
    successors: VecDeque<SimOp>,
}

#[derive(Debug)]
enum EventKind {
    Complete,
    TimedOut,
}

pub(crate) struct SimDriver {
    cfg: SimDeviceConfig,
    staged: Vec<(SimOp, bool)>,
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, (EventKind, SimOp)>,
    waiting: VecDeque<SimOp>,
    busy: usize,
    seq: u64,
    cq: VecDeque<IoCompletion>,
}

impl SimDriver {
    pub(crate) fn new(cfg: SimDeviceConfig) -> SimDriver {
        SimDriver {
            cfg,
            staged: Vec::new(),
            heap: BinaryHeap::new(),
            events: HashMap::new(),
            waiting: VecDeque::new(),
            busy: 0,
            seq: 0,
            cq: VecDeque::new(),
        }
    }

    pub(crate) fn clock(&self) -> &VirtualClock {
        &self.cfg.clock
    }

    fn latency_ns(&self, kind: IoKind) -> Option<u64> {
        match kind {
            IoKind::Nop => None,
            IoKind::Read => Some(self.cfg.read_latency.as_nanos() as u64),
            IoKind::Write => Some(self.cfg.write_latency.as_nanos() as u64),
            IoKind::Fsync { .. } => Some(self.cfg.flush_latency.as_nanos() as u64),
            _ => unreachable!("unsupported kinds are rejected at enqueue"),
        }
    }

    fn schedule(&mut self, at: u64, kind: EventKind, op: SimOp) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.events.insert(seq, (kind, op));
    }

    /// The op becomes runnable at `t`: take a device channel or queue for one.
    fn make_ready(&mut self, mut op: SimOp, t: u64) {
        op.ready_at = t;
        match self.latency_ns(op.kind) {
            None => self.start(op, t, 0),
            Some(lat) => {
                if self.busy < self.cfg.max_inflight {
                    self.busy += 1;
                    self.start(op, t, lat);
                } else {
                    self.waiting.push_back(op);
                }
            }
        }
    }

    fn start(&mut self, op: SimOp, t: u64, lat: u64) {
        let done = t + lat;
        match op.timeout_ns {
            Some(limit) if done > op.ready_at + limit => {
                let at = (op.ready_at + limit).max(t);
                self.schedule(at, EventKind::TimedOut, op)
            }
            _ => self.schedule(done, EventKind::Complete, op),
        }
    }

    fn execute(op: &SimOp) -> i32 {
        // SAFETY: the enqueue contract keeps `ptr..ptr+len` valid until the
        // completion is reaped, and this runs before it is posted.
        let rc = unsafe {
            match op.kind {
                IoKind::Nop | IoKind::Fsync { .. } => 0,
                IoKind::Read => {
                    libc::pread(op.fd, op.ptr as *mut libc::c_void, op.len, op.offset as i64)
                }
                IoKind::Write => {
                    libc::pwrite(op.fd, op.ptr as *const libc::c_void, op.len, op.offset as i64)
                }
                _ => unreachable!(),
            }
        };
        if rc < 0 {
            -std::io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO)
        } else {
            rc as i32
        }
    }

    /// Processes every event due at or before `t`, in (time, seq) order.
    fn run_until(&mut self, t: u64) {
        while let Some(&Reverse((at, seq))) = self.heap.peek() {
            if at > t {
                break;
            }
            self.heap.pop();
            let (kind, mut op) = self.events.remove(&seq).expect("event");
            let occupied = self.latency_ns(op.kind).is_some();
            let res = match kind {
                EventKind::Complete => Self::execute(&op),
                EventKind::TimedOut => -libc::ECANCELED,
            };
            self.cq.push_back(IoCompletion::from_result(op.tag, res));
            // A timed-out op still holds its channel until the device would
            // have finished; approximate by freeing it now.
            if occupied {
                self.busy -= 1;
                if let Some(next) = self.waiting.pop_front() {
                    self.busy += 1;
                    let lat = self.latency_ns(next.kind).unwrap_or(0);
                    self.start(next, at, lat);
                }
            }
            let mut rest = std::mem::take(&mut op.successors);
            if let Some(mut next) = rest.pop_front() {
                next.successors = rest;
                if res >= 0 {
                    self.make_ready(next, at);
                } else {
                    // Failed link: the rest of the chain is cancelled.
                    self.cq.push_back(IoCompletion::error(next.tag, libc::ECANCELED));
                    for op in next.successors {
                        self.cq.push_back(IoCompletion::error(op.tag, libc::ECANCELED));
                    }
                }
            }
        }
    }

    fn next_event_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _))| *t)
    }
}

impl Driver for SimDriver {
    fn name(&self) -> &'static str {
        "simulated"
    }

    fn supports(&self, req: &IoRequest) -> bool {
        matches!(
            req.kind,
            IoKind::Nop | IoKind::Read | IoKind::Write | IoKind::Fsync { .. }
        )
    }

    fn stage(&mut self, req: &IoRequest, desc: FileDesc) -> Result<()> {
        let op = SimOp {
            tag: req.tag,
            kind: req.kind,
            fd: desc.fd,
            offset: req.offset,
            ptr: req.buf.ptr() as usize,
            len: req.buf.len(),
            timeout_ns: req.flags.link_timeout_us.map(|us| us * 1000),
            ready_at: 0,
            successors: VecDeque::new(),
        };
        self.staged.push((op, req.flags.link_next));
        Ok(())
    }

    fn staged(&self) -> usize {
        self.staged.len()
    }

    fn submit(&mut self) -> Result<usize> {
        let n = self.staged.len();
        if n == 0 {
            return Ok(0);
        }
        if let Some(cpu) = self.cfg.cpu {
            let mut cycles = cpu.enter_cycles;
            for (op, _) in &self.staged {
                cycles += match op.kind {
                    IoKind::Read => cpu.read_cycles,
                    IoKind::Write | IoKind::Fsync { .. } => cpu.write_cycles,
                    _ => 0,
                };
            }
            self.cfg.clock.advance_ns(cpu.cycles_to_ns(cycles));
        }
        let now = self.cfg.clock.now_ns();
        // Group linked requests into chains; the head of each chain is ready now.
        let mut chain: Option<SimOp> = None;
        let staged = std::mem::take(&mut self.staged);
        for (op, link_next) in staged {
            match chain.as_mut() {
                Some(head) => head.successors.push_back(op),
                None => chain = Some(op),
            }
            if !link_next {
                let head = chain.take().expect("chain head");
                self.make_ready(head, now);
            }
        }
        if let Some(head) = chain {
            // A trailing link flag has nothing to link to.
            self.make_ready(head, now);
        }
        self.run_until(now);
        Ok(n)
    }

    fn reap(
        &mut self,
        out: &mut Vec<IoCompletion>,
        min: usize,
        max: usize,
        timeout: Option<Duration>,
    ) -> Result<()> {
        let start = self.cfg.clock.now_ns();
        let deadline = timeout.map(|d| start + d.as_nanos() as u64);
        self.run_until(start);
        while self.cq.len() < min {
            let Some(t) = self.next_event_time() else {
                if let Some(d) = deadline {
                    self.cfg.clock.advance_to(d);
                }
                return Err(RtError::TimedOut {
                    wanted: min,
                    got: self.cq.len(),
                });
            };
            if let Some(d) = deadline {
                if t > d {
                    self.cfg.clock.advance_to(d);
                    self.run_until(d);
                    return Err(RtError::TimedOut {
                        wanted: min,
                        got: self.cq.len(),
                    });
                }
            }
            self.cfg.clock.advance_to(t);
            self.run_until(t);
        }
        let take = self.cq.len().min(max);
        out.extend(self.cq.drain(..take));
        Ok(())
    }
}
