//! Cooperative fibers on one ring.
//!
//! Each fiber is a future polled by a single-threaded scheduler. A fiber
//! stages I/O through its [`IoCtx`] and suspends; staged requests are held in
//! the ring's submission queue until [`adaptive_flush_decision`] says the
//! batch is worth a kernel transition.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};
use std::time::Instant;

use thiserror::Error;

use crate::rt::{IoCompletion, IoRequest, RingHandle, RtError};

pub type FiberId = usize;

pub const DEFAULT_MAX_FIBERS: usize = 128;
pub const DEFAULT_MAX_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("fiber limit of {0} reached")]
    AtCapacity(usize),
    #[error("{0} fibers are suspended with no I/O queued or in flight")]
    Deadlock(usize),
    #[error(transparent)]
    Io(#[from] RtError),
}

/// Flush when nothing else can run, or when the staged batch reaches the
/// ratio of in-flight I/Os to runnable fibers, clamped to `[1, max_batch]`.
pub fn adaptive_flush_decision(queued: usize, inflight: usize, runnable: usize, max_batch: usize) -> bool {
    runnable == 0 || queued >= flush_threshold(inflight, runnable, max_batch)
}

pub fn flush_threshold(inflight: usize, runnable: usize, max_batch: usize) -> usize {
    (inflight / runnable.max(1)).clamp(1, max_batch.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiberState {
    Runnable,
    /// Suspended on the I/O with this internal tag, or parked when `None`.
    Awaiting(Option<u64>),
    Finished,
}

#[derive(Debug, Clone, Copy)]
pub struct SchedConfig {
    pub max_fibers: usize,
    pub max_batch: usize,
    /// Upper bound on completions taken per reap call.
    pub reap_max: usize,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig {
            max_fibers: DEFAULT_MAX_FIBERS,
            max_batch: DEFAULT_MAX_BATCH,
            reap_max: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SchedulerReport {
    pub tx_completed: u64,
    pub flushes: u64,
    pub submitted: u64,
    pub mean_batch_size: f64,
}

/// When [`Scheduler::run`] starts asking fibers to stop.
#[derive(Debug, Clone, Copy)]
pub enum Until {
    AllFinished,
    Transactions(u64),
    Deadline(Instant),
}

struct FiberSlot {
    state: FiberState,
    queued: bool,
    /// Internal tags of this fiber's requests that have not been awaited yet.
    results: HashMap<u64, IoCompletion>,
}

#[derive(Default)]
struct State {
    ready: VecDeque<FiberId>,
    fibers: Vec<FiberSlot>,
    live: usize,
    current: Option<FiberId>,
    inflight: usize,
    next_tag: u64,
    /// internal tag -> (fiber, user tag)
    owners: HashMap<u64, (FiberId, u64)>,
    tx: u64,
    flushes: u64,
    submitted: u64,
    stop: bool,
}

impl State {
    fn wake(&mut self, id: FiberId) {
        let f = &mut self.fibers[id];
        if f.state == FiberState::Finished || f.queued {
            return;
        }
        f.state = FiberState::Runnable;
        f.queued = true;
        self.ready.push_back(id);
    }
}

struct Shared {
    ring: RefCell<RingHandle>,
    st: RefCell<State>,
}

/// Handle through which fibers reach the ring and the scheduler.
#[derive(Clone)]
pub struct IoCtx(Rc<Shared>);

impl IoCtx {
    /// Stages `req` for the calling fiber. Enqueue errors are returned
    /// immediately and the fiber keeps running.
    ///
    /// # Safety
    ///
    /// Buffers referenced by `req` must stay valid until the returned
    /// future resolves.
    pub unsafe fn submit(&self, req: IoRequest) -> Result<IoWait, RtError> {
        let mut st = self.0.st.borrow_mut();
        let fiber = st.current.expect("submit outside a fiber");
        let tag = st.next_tag;
        let user_tag = req.tag;
        let req = req.tag(tag);
        let mut ring = self.0.ring.borrow_mut();
        let res = match ring.enqueue(req) {
            Err(RtError::SqFull) => {
                let n = ring.submit()?;
                st.flushes += 1;
                st.submitted += n as u64;
                st.inflight += n;
                ring.enqueue(req)
            }
            r => r,
        };
        res?;
        st.next_tag += 1;
        st.owners.insert(tag, (fiber, user_tag));
        Ok(IoWait {
            ctx: self.clone(),
            fiber,
            tag,
        })
    }

    /// Stages `req` and waits for its completion.
    ///
    /// # Safety
    ///
    /// As for [`IoCtx::submit`].
    pub async unsafe fn io(&self, req: IoRequest) -> Result<IoCompletion, RtError> {
        Ok(self.submit(req)?.await)
    }

    pub fn current(&self) -> FiberId {
        self.0.st.borrow().current.expect("outside a fiber")
    }

    /// Suspends the calling fiber until [`IoCtx::wake`] names it.
    pub fn park(&self) -> Park {
        Park {
            ctx: self.clone(),
            parked: false,
        }
    }

    pub fn wake(&self, id: FiberId) {
        self.0.st.borrow_mut().wake(id);
    }

    /// Moves the calling fiber to the back of the ready queue.
    pub fn yield_now(&self) -> Park {
        let id = self.current();
        self.wake_later(id);
        self.park()
    }

    fn wake_later(&self, id: FiberId) {
        let mut st = self.0.st.borrow_mut();
        st.fibers[id].queued = false;
        st.wake(id);
    }

    /// Counts one finished transaction towards the report and `Until`.
    pub fn complete_tx(&self) {
        self.0.st.borrow_mut().tx += 1;
    }

    /// True once the scheduler's stop condition has been met.
    pub fn should_stop(&self) -> bool {
        self.0.st.borrow().stop
    }

    pub fn with_ring<R>(&self, f: impl FnOnce(&mut RingHandle) -> R) -> R {
        f(&mut self.0.ring.borrow_mut())
    }

    pub fn state(&self, id: FiberId) -> FiberState {
        self.0.st.borrow().fibers[id].state
    }
}

/// Completion of one request staged by [`IoCtx::submit`].
pub struct IoWait {
    ctx: IoCtx,
    fiber: FiberId,
    tag: u64,
}

impl Future for IoWait {
    type Output = IoCompletion;

    fn poll(self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<IoCompletion> {
        let mut st = self.ctx.0.st.borrow_mut();
        let slot = &mut st.fibers[self.fiber];
        match slot.results.remove(&self.tag) {
            Some(c) => Poll::Ready(c),
            None => {
                slot.state = FiberState::Awaiting(Some(self.tag));
                Poll::Pending
            }
        }
    }
}

pub struct Park {
    ctx: IoCtx,
    parked: bool,
}

impl Future for Park {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<()> {
        if self.parked {
            return Poll::Ready(());
        }
        self.parked = true;
        let mut st = self.ctx.0.st.borrow_mut();
        let id = st.current.expect("park outside a fiber");
        if st.fibers[id].state == FiberState::Runnable && !st.fibers[id].queued {
            st.fibers[id].state = FiberState::Awaiting(None);
        }
        Poll::Pending
    }
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

pub struct Scheduler {
    ctx: IoCtx,
    cfg: SchedConfig,
    tasks: Vec<Option<Task>>,
    scratch: Vec<IoCompletion>,
}

impl Scheduler {
    pub fn new(ring: RingHandle, cfg: SchedConfig) -> Scheduler {
        let shared = Shared {
            ring: RefCell::new(ring),
            st: RefCell::new(State::default()),
        };
        Scheduler {
            ctx: IoCtx(Rc::new(shared)),
            cfg,
            tasks: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn ctx(&self) -> &IoCtx {
        &self.ctx
    }

    pub fn set_max_batch(&mut self, n: usize) {
        self.cfg.max_batch = n;
    }

    /// Spawns a fiber running the future built by `f`.
    pub fn spawn<F, Fut>(&mut self, f: F) -> Result<FiberId, SchedError>
    where
        F: FnOnce(IoCtx) -> Fut,
        Fut: Future<Output = ()> + 'static,
    {
        let mut st = self.ctx.0.st.borrow_mut();
        if st.live >= self.cfg.max_fibers {
            return Err(SchedError::AtCapacity(self.cfg.max_fibers));
        }
        let id = st.fibers.len();
        st.fibers.push(FiberSlot {
            state: FiberState::Runnable,
            queued: true,
            results: HashMap::new(),
        });
        st.ready.push_back(id);
        st.live += 1;
        drop(st);
        self.tasks.push(Some(Box::pin(f(self.ctx.clone()))));
        Ok(id)
    }

    pub fn ready_queue(&self) -> Vec<FiberId> {
        self.ctx.0.st.borrow().ready.iter().copied().collect()
    }

    pub fn live(&self) -> usize {
        self.ctx.0.st.borrow().live
    }

    pub fn inflight(&self) -> usize {
        self.ctx.0.st.borrow().inflight
    }

    pub fn into_ring(self) -> RingHandle {
        drop(self.tasks);
        match Rc::try_unwrap(self.ctx.0) {
            Ok(shared) => shared.ring.into_inner(),
            Err(_) => panic!("IoCtx outlived its scheduler"),
        }
    }

    /// Polls the next runnable fiber. Returns false when none is runnable.
    pub fn step(&mut self) -> Result<bool, SchedError> {
        let id = {
            let mut st = self.ctx.0.st.borrow_mut();
            let Some(id) = st.ready.pop_front() else {
                return Ok(false);
            };
            st.fibers[id].queued = false;
            st.current = Some(id);
            id
        };
        let mut cx = Context::from_waker(Waker::noop());
        let task = self.tasks[id].as_mut().expect("finished fiber scheduled");
        let done = task.as_mut().poll(&mut cx).is_ready();
        let mut st = self.ctx.0.st.borrow_mut();
        st.current = None;
        if done {
            st.fibers[id].state = FiberState::Finished;
            st.live -= 1;
            drop(st);
            self.tasks[id] = None;
        } else if st.fibers[id].state == FiberState::Runnable && !st.fibers[id].queued {
            // Pending on something other than the ring: treat as a yield.
            st.wake(id);
        }
        Ok(true)
    }

    fn maybe_flush(&mut self, force: bool) -> Result<(), SchedError> {
        let mut st = self.ctx.0.st.borrow_mut();
        let mut ring = self.ctx.0.ring.borrow_mut();
        let queued = ring.staged();
        if queued == 0 {
            return Ok(());
        }
        if force || adaptive_flush_decision(queued, st.inflight, st.ready.len(), self.cfg.max_batch) {
            let n = ring.submit()?;
            st.flushes += 1;
            st.submitted += n as u64;
            st.inflight += n;
        }
        Ok(())
    }

    fn reap(&mut self, min: usize) -> Result<(), SchedError> {
        self.scratch.clear();
        let mut ring = self.ctx.0.ring.borrow_mut();
        ring.reap_into(&mut self.scratch, min, self.cfg.reap_max.max(min), None)?;
        drop(ring);
        let mut st = self.ctx.0.st.borrow_mut();
        for c in self.scratch.drain(..) {
            let internal = c.tag;
            let owner = if c.more_coming {
                st.owners.get(&internal).copied()
            } else {
                st.inflight -= 1;
                st.owners.remove(&internal)
            };
            let Some((fiber, user_tag)) = owner else {
                continue;
            };
            let mut c = c;
            c.tag = user_tag;
            st.fibers[fiber].results.insert(internal, c);
            st.wake(fiber);
        }
        Ok(())
    }

    fn check_until(&self, until: Until) {
        let mut st = self.ctx.0.st.borrow_mut();
        if st.stop {
            return;
        }
        st.stop = match until {
            Until::AllFinished => false,
            Until::Transactions(n) => st.tx >= n,
            Until::Deadline(t) => Instant::now() >= t,
        };
    }

    /// Runs fibers until all have finished. Once `until` is met, fibers
    /// see [`IoCtx::should_stop`] and are expected to wind down.
    pub fn run(&mut self, until: Until) -> Result<SchedulerReport, SchedError> {
        let start = {
            let mut st = self.ctx.0.st.borrow_mut();
            st.stop = false;
            (st.tx, st.flushes, st.submitted)
        };
        loop {
            let pass = self.ctx.0.st.borrow().ready.len();
            for _ in 0..pass {
                self.step()?;
                self.maybe_flush(false)?;
            }
            self.check_until(until);
            let (runnable, inflight, live) = {
                let st = self.ctx.0.st.borrow();
                (st.ready.len(), st.inflight, st.live)
            };
            if runnable > 0 {
                if inflight > 0 {
                    self.reap(0)?;
                }
                continue;
            }
            // Nothing runnable: never block with requests still staged.
            self.maybe_flush(true)?;
            let inflight = self.ctx.0.st.borrow().inflight;
            if inflight > 0 {
                self.reap(1)?;
            } else if live > 0 {
                return Err(SchedError::Deadlock(live));
            } else {
                break;
            }
        }
        let st = self.ctx.0.st.borrow();
        let flushes = st.flushes - start.1;
        let submitted = st.submitted - start.2;
        Ok(SchedulerReport {
            tx_completed: st.tx - start.0,
            flushes,
            submitted,
            mean_batch_size: if flushes == 0 {
                0.0
            } else {
                submitted as f64 / flushes as f64
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rt::{Buf, RingConfig, SimDeviceConfig, StorageFile};
    use proptest::prelude::*;
    use std::cell::Cell;
    use std::io::Write;

    fn sim_sched(cfg: SchedConfig) -> Scheduler {
        let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default()).depth(256)).unwrap();
        Scheduler::new(ring, cfg)
    }

    fn file() -> (tempfile::NamedTempFile, StorageFile) {
        let mut t = tempfile::NamedTempFile::new().unwrap();
        t.write_all(&vec![3u8; 1 << 16]).unwrap();
        let f = StorageFile::open(t.path(), false, false).unwrap();
        (t, f)
    }

    #[test]
    fn flush_examples() {
        assert!(adaptive_flush_decision(1, 5, 0, 32));
        assert!(adaptive_flush_decision(4, 0, 10, 32));
        assert!(!adaptive_flush_decision(2, 64, 4, 32));
        assert_eq!(flush_threshold(64, 4, 32), 16);
    }

    #[test]
    fn threshold_bounds_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let inflight = rng.gen_range(0..100_000);
            let runnable = rng.gen_range(0..1000);
            let max_batch = rng.gen_range(1..128);
            let t = flush_threshold(inflight, runnable, max_batch);
            assert!((1..=max_batch).contains(&t));
        }
    }

    proptest! {
        #[test]
        fn threshold_in_range(inflight in 0usize..1_000_000, runnable in 0usize..10_000, max_batch in 1usize..256, queued in 0usize..512) {
            let t = flush_threshold(inflight, runnable, max_batch);
            prop_assert!(t >= 1 && t <= max_batch);
            prop_assert_eq!(adaptive_flush_decision(queued, inflight, runnable, max_batch), runnable == 0 || queued >= t);
        }
    }

    #[test]
    fn spawn_ids_and_capacity() {
        let mut s = sim_sched(SchedConfig::default());
        assert_eq!(s.spawn(|_| async {}).unwrap(), 0);
        assert_eq!(s.ready_queue(), vec![0]);
        for _ in 1..128 {
            s.spawn(|_| async {}).unwrap();
        }
        assert!(matches!(s.spawn(|_| async {}), Err(SchedError::AtCapacity(128))));
    }

    #[test]
    fn immediate_return_finishes_in_one_step() {
        let mut s = sim_sched(SchedConfig::default());
        let id = s.spawn(|_| async {}).unwrap();
        assert!(s.step().unwrap());
        assert_eq!(s.ctx().state(id), FiberState::Finished);
        assert!(!s.step().unwrap());
        let r = s.run(Until::AllFinished).unwrap();
        assert_eq!(r.flushes, 0);
    }

    #[test]
    fn single_read_suspends_and_resumes() {
        let (_t, f) = file();
        let desc = f.desc();
        let mut s = sim_sched(SchedConfig::default());
        let got = Rc::new(Cell::new(0u32));
        let other_ran = Rc::new(Cell::new(0u32));
        let g = got.clone();
        s.spawn(move |ctx| async move {
            let mut buf = vec![0u8; 4096];
            let c = unsafe { ctx.io(IoRequest::read(desc, 0, Buf::from_slice(&mut buf)).tag(77)) }
                .await
                .unwrap();
            assert_eq!(c.tag, 77);
            g.set(c.bytes);
        })
        .unwrap();
        let o = other_ran.clone();
        s.spawn(move |ctx| async move {
            for _ in 0..3 {
                o.set(o.get() + 1);
                ctx.yield_now().await;
            }
        })
        .unwrap();
        let r = s.run(Until::AllFinished).unwrap();
        assert_eq!(got.get(), 4096);
        assert_eq!(other_ran.get(), 3);
        assert_eq!(r.flushes, 1);
        assert_eq!(r.mean_batch_size, 1.0);
    }

    #[test]
    fn out_of_order_completions_reach_their_fibers() {
        let (_t, f) = file();
        let desc = f.desc();
        // A read (70us) and a write (12us) in both spawn orders.
        for order in [[true, false], [false, true]] {
            let mut s = sim_sched(SchedConfig::default());
            let log = Rc::new(RefCell::new(Vec::new()));
            for (i, is_read) in order.into_iter().enumerate() {
                let log = log.clone();
                s.spawn(move |ctx| async move {
                    let mut buf = vec![0u8; 512];
                    let b = Buf::from_slice(&mut buf);
                    let req = if is_read {
                        IoRequest::read(desc, 0, b)
                    } else {
                        IoRequest::write(desc, 4096, b)
                    };
                    let c = unsafe { ctx.io(req.tag(i as u64)) }.await.unwrap();
                    log.borrow_mut().push((i, c.tag));
                })
                .unwrap();
            }
            s.run(Until::AllFinished).unwrap();
            let log = log.borrow();
            assert_eq!(log.len(), 2);
            assert!(log.iter().all(|(i, t)| *i as u64 == *t));
            // The write finishes first regardless of spawn order.
            let write_fiber = order.iter().position(|r| !r).unwrap();
            assert_eq!(log[0].0, write_fiber);
        }
    }

    #[test]
    fn enqueue_error_keeps_fiber_running() {
        let dir = tempfile::tempdir().unwrap();
        let Ok(f) = StorageFile::open(&dir.path().join("d"), true, true) else {
            return;
        };
        let desc = f.desc();
        let mut s = sim_sched(SchedConfig::default());
        let ok = Rc::new(Cell::new(false));
        let o = ok.clone();
        s.spawn(move |ctx| async move {
            let mut buf = vec![0u8; 100];
            let r = unsafe { ctx.submit(IoRequest::read(desc, 3, Buf::from_slice(&mut buf))) };
            assert!(matches!(r, Err(RtError::Misaligned { .. })));
            assert_eq!(ctx.state(ctx.current()), FiberState::Runnable);
            o.set(true);
        })
        .unwrap();
        let r = s.run(Until::AllFinished).unwrap();
        assert!(ok.get());
        assert_eq!(r.flushes, 0);
    }

    /// Replays the first pass of `n` fibers that each stage one read.
    fn first_pass_oracle(n: usize, max_batch: usize) -> (u64, u64) {
        let (mut queued, mut inflight, mut flushes) = (0usize, 0usize, 0u64);
        for i in 0..n {
            queued += 1;
            let runnable = n - 1 - i;
            if adaptive_flush_decision(queued, inflight, runnable, max_batch) {
                inflight += queued;
                queued = 0;
                flushes += 1;
            }
        }
        (flushes, inflight as u64)
    }

    #[test]
    fn many_fibers_batch_reads() {
        let (_t, f) = file();
        let desc = f.desc();
        let mut s = sim_sched(SchedConfig::default());
        for _ in 0..128 {
            s.spawn(move |ctx| async move {
                let mut buf = vec![0u8; 512];
                unsafe { ctx.io(IoRequest::read(desc, 0, Buf::from_slice(&mut buf))) }
                    .await
                    .unwrap();
            })
            .unwrap();
        }
        let r = s.run(Until::AllFinished).unwrap();
        let (flushes, submitted) = first_pass_oracle(128, 32);
        assert_eq!(r.flushes, flushes);
        assert_eq!(r.submitted, submitted);
        assert!(r.mean_batch_size > 1.0, "{r:?}");
    }

    #[test]
    fn park_without_waker_deadlocks() {
        let mut s = sim_sched(SchedConfig::default());
        s.spawn(|ctx| async move { ctx.park().await }).unwrap();
        assert!(matches!(s.run(Until::AllFinished), Err(SchedError::Deadlock(1))));
    }

    #[test]
    fn wake_resumes_parked_fiber() {
        let mut s = sim_sched(SchedConfig::default());
        let a = s.spawn(|ctx| async move { ctx.park().await }).unwrap();
        s.spawn(move |ctx| async move { ctx.wake(a) }).unwrap();
        s.run(Until::AllFinished).unwrap();
    }

    #[test]
    fn stop_condition_winds_down() {
        let mut s = sim_sched(SchedConfig::default());
        for _ in 0..4 {
            s.spawn(|ctx| async move {
                while !ctx.should_stop() {
                    unsafe { ctx.io(IoRequest::nop()) }.await.unwrap();
                    ctx.complete_tx();
                }
            })
            .unwrap();
        }
        let r = s.run(Until::Transactions(100)).unwrap();
        assert!(r.tx_completed >= 100 && r.tx_completed < 110, "{r:?}");
        assert_eq!(s.live(), 0);
    }

    /// Random fiber programs of I/O and yields: whenever the scheduler is
    /// about to block in reap, nothing is left staged, and every fiber
    /// receives exactly its own completions.
    #[test]
    fn starvation_freedom_trace() {
        use rand::{Rng, SeedableRng};
        let (_t, f) = file();
        let desc = f.desc();
        for seed in 0..50u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = sim_sched(SchedConfig {
                max_batch: rng.gen_range(1..16),
                ..SchedConfig::default()
            });
            let fibers = rng.gen_range(1..40);
            let received = Rc::new(Cell::new(0usize));
            let mut expected = 0;
            for id in 0..fibers {
                let steps: Vec<u8> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..3)).collect();
                expected += steps.iter().filter(|&&s| s != 2).count();
                let received = received.clone();
                s.spawn(move |ctx| async move {
                    for (k, step) in steps.into_iter().enumerate() {
                        let tag = ((id as u64) << 32) | k as u64;
                        let mut buf = vec![0u8; 512];
                        let b = Buf::from_slice(&mut buf);
                        let req = match step {
                            0 => IoRequest::read(desc, 0, b),
                            1 => IoRequest::write(desc, 8192, b),
                            _ => {
                                ctx.yield_now().await;
                                continue;
                            }
                        };
                        let c = unsafe { ctx.io(req.tag(tag)) }.await.unwrap();
                        assert_eq!(c.tag, tag);
                        received.set(received.get() + 1);
                    }
                })
                .unwrap();
            }
            loop {
                let pass = s.ready_queue().len();
                for _ in 0..pass {
                    s.step().unwrap();
                    s.maybe_flush(false).unwrap();
                }
                if s.ready_queue().is_empty() {
                    s.maybe_flush(true).unwrap();
                    assert_eq!(s.ctx().with_ring(|r| r.staged()), 0);
                    if s.inflight() == 0 {
                        break;
                    }
                    s.reap(1).unwrap();
                } else if s.inflight() > 0 {
                    s.reap(0).unwrap();
                }
            }
            assert_eq!(s.live(), 0);
            assert_eq!(received.get(), expected);
        }
    }
}
