//! YCSB-style load and run driver.
//!
//! A database of `tuples` dense keys is bulk-loaded into a B+tree file. A
//! run executes uniform point transactions against it through one engine
//! variant and reports steady-state throughput after the pool has filled.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::btree::{bulk_page_count, leaf_fanout, BTree, TreeError};
use crate::bufmgr::{BufferPool, PoolError, FileHeader, PageIo, PageStore, PoolConfig, PoolStats, DEFAULT_EVICT_BATCH};
use crate::cycles;
use crate::fiber::{IoCtx, SchedConfig, SchedError, Scheduler, Until, DEFAULT_MAX_BATCH, DEFAULT_MAX_FIBERS};
use crate::rt::{Backend, RingConfig, RingHandle, RtError, SimDeviceConfig, StorageFile, VirtualClock};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload configuration: {0}")]
    Config(String),
    #[error("variant {variant} is not supported here: {reason}")]
    VariantUnsupported { variant: Variant, reason: String },
    #[error("out of space on the database target")]
    OutOfSpace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ring(#[from] RtError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// How long the measured phase runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunLength {
    Ops(u64),
    /// Virtual time on the simulator, wall time otherwise.
    Duration(Duration),
}

#[derive(Debug, Clone)]
pub struct WorkloadConfig {
    pub tuples: u64,
    pub value_width: usize,
    pub update_fraction: f64,
    pub ops: RunLength,
    pub fibers: usize,
    pub pool_bytes: u64,
    pub page_size: usize,
    pub compute_cycles_per_tx: u64,
    pub seed: u64,
    /// Exclude transactions until the pool has filled.
    pub warmup: bool,
}

pub const KEY_WIDTH: usize = 8;

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            tuples: 10_000_000,
            value_width: 128,
            update_fraction: 1.0,
            ops: RunLength::Duration(Duration::from_secs(10)),
            fibers: DEFAULT_MAX_FIBERS,
            pool_bytes: 1 << 30,
            page_size: 4096,
            compute_cycles_per_tx: 0,
            seed: 42,
            warmup: true,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Config(m));
        if !(0.0..=1.0).contains(&self.update_fraction) {
            return bad(format!("update_fraction {} outside [0, 1]", self.update_fraction));
        }
        if !self.page_size.is_power_of_two() || self.page_size < 512 {
            return bad(format!("page_size {} must be a power of two >= 512", self.page_size));
        }
        if self.value_width == 0 {
            return bad("value_width must be positive".into());
        }
        if leaf_fanout(self.page_size, self.value_width) < 2 {
            return bad(format!(
                "value_width {} leaves fewer than two entries per {} byte page",
                self.value_width, self.page_size
            ));
        }
        if self.tuples == 0 {
            return bad("tuples must be positive".into());
        }
        if self.fibers == 0 {
            return bad("fibers must be positive".into());
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.pool_bytes / self.page_size as u64) as usize
    }

    /// Pool size at which a uniform run faults on roughly `r_pf` of its
    /// transactions: every inner page plus a `1 - r_pf` share of the leaves.
    pub fn pool_bytes_for_fault_rate(&self, r_pf: f64) -> u64 {
        let (pages, _) = bulk_page_count(self.tuples, self.page_size, self.value_width);
        let leaves = self.tuples.div_ceil(leaf_fanout(self.page_size, self.value_width) as u64);
        let inner = pages - leaves;
        let cached = ((1.0 - r_pf.clamp(0.0, 1.0)) * leaves as f64).round() as u64;
        (inner + cached) * self.page_size as u64
    }
}

/// Rungs of the engine ladder. Each includes every feature of the ones before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    PosixSync,
    UringSync,
    BatchEvict,
    Fibers,
    BatchSubmit,
    RegBufs,
    Passthru,
    Iopoll,
    Sqpoll,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::PosixSync,
        Variant::UringSync,
        Variant::BatchEvict,
        Variant::Fibers,
        Variant::BatchSubmit,
        Variant::RegBufs,
        Variant::Passthru,
        Variant::Iopoll,
        Variant::Sqpoll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PosixSync => "posix-sync",
            Variant::UringSync => "uring-sync",
            Variant::BatchEvict => "+batch-evict",
            Variant::Fibers => "+fibers",
            Variant::BatchSubmit => "+batch-submit",
            Variant::RegBufs => "+reg-bufs",
            Variant::Passthru => "+passthru",
            Variant::Iopoll => "+iopoll",
            Variant::Sqpoll => "+sqpoll",
        }
    }

    pub fn evict_batch(self) -> usize {
        if self >= Variant::BatchEvict {
            DEFAULT_EVICT_BATCH
        } else {
            1
        }
    }

    pub fn fibers(self, configured: usize) -> usize {
        if self >= Variant::Fibers {
            configured
        } else {
            1
        }
    }

    pub fn max_batch(self) -> usize {
        if self >= Variant::BatchSubmit {
            DEFAULT_MAX_BATCH
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let want = s.trim_start_matches('+');
        Variant::ALL
            .into_iter()
            .find(|v| v.name().trim_start_matches('+') == want)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Where the database lives and how it is accessed.
#[derive(Debug, Clone)]
pub struct Target {
    /// Database file or block device.
    pub path: PathBuf,
    pub direct: bool,
    /// NVMe character device for the passthrough rungs.
    pub passthrough_dev: Option<PathBuf>,
    /// Run against the simulated device instead of the kernel.
    pub sim: Option<SimDeviceConfig>,
}

impl Target {
    pub fn file(path: impl Into<PathBuf>, direct: bool) -> Target {
        let path = path.into();
        Target {
            passthrough_dev: passthrough_char_device(&path),
            path,
            direct,
            sim: None,
        }
    }

    pub fn simulated(path: impl Into<PathBuf>, sim: SimDeviceConfig) -> Target {
        Target {
            path: path.into(),
            direct: false,
            passthrough_dev: None,
            sim: Some(sim),
        }
    }
}

/// `/dev/nvme0n1` maps to `/dev/ng0n1` when that device exists.
pub fn passthrough_char_device(block: &Path) -> Option<PathBuf> {
    let name = block.file_name()?.to_str()?;
    let rest = name.strip_prefix("nvme")?;
    let ng = block.with_file_name(format!("ng{rest}"));
    ng.exists().then_some(ng)
}

#[derive(Debug, Clone)]
pub struct DatabaseFiles {
    pub path: PathBuf,
    pub header: FileHeader,
}

/// Value bytes of `key` as loaded with `seed`.
fn fill_values(rng: &mut ChaCha8Rng, value_width: usize) -> Vec<u8> {
    let mut v = vec![0u8; value_width];
    rng.fill_bytes(&mut v);
    v
}

/// Bulk-loads `tuples` keys `0..tuples` with seeded random values.
pub fn load(cfg: &WorkloadConfig, target: &Target) -> Result<DatabaseFiles, WorkloadError> {
    cfg.validate()?;
    let file = StorageFile::open(&target.path, target.direct, true)?;
    let store = PageStore::new(file, cfg.page_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vw = cfg.value_width;
    let header = bulk_load_store(&store, vw, cfg.tuples, &mut rng)?;
    store.file().file().sync_all()?;
    Ok(DatabaseFiles {
        path: target.path.clone(),
        header,
    })
}

fn bulk_load_store(store: &PageStore, vw: usize, tuples: u64, rng: &mut ChaCha8Rng) -> Result<FileHeader, WorkloadError> {
    let header = crate::btree::bulk_load(store, vw, (0..tuples).map(|k| (k, fill_values(rng, vw))))
        .map_err(|e| match e.raw_os_error() {
            Some(libc::ENOSPC) => WorkloadError::OutOfSpace,
            _ if e.kind() == std::io::ErrorKind::InvalidInput => WorkloadError::Config(e.to_string()),
            _ => WorkloadError::Io(e),
        })?;
    Ok(header)
}

/// The initial values a load with `seed` writes, in key order.
pub fn initial_values(seed: u64, tuples: u64, value_width: usize) -> impl Iterator<Item = (u64, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tuples).map(move |k| (k, fill_values(&mut rng, value_width)))
}

/// One transaction of the operation stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Op {
    pub key: u64,
    pub update: bool,
}

/// Per-fiber operation generator; fiber `i` of a run draws from `OpStream::new(seed, i)`.
#[derive(Debug, Clone)]
pub struct OpStream {
    rng: ChaCha8Rng,
    tuples: u64,
    update_fraction: f64,
}

impl OpStream {
    pub fn new(cfg: &WorkloadConfig, fiber: usize) -> OpStream {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(fiber as u64 + 1);
        OpStream {
            rng,
            tuples: cfg.tuples,
            update_fraction: cfg.update_fraction,
        }
    }
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        let key = self.rng.gen_range(0..self.tuples);
        let update = self.rng.gen::<f64>() < self.update_fraction;
        Some(Op { key, update })
    }
}

/// The read-modify-write applied by an update: the leading (up to) eight
/// value bytes are a little-endian counter that is incremented.
pub fn bump(v: &mut [u8]) {
    let n = v.len().min(8);
    let mut b = [0u8; 8];
    b[..n].copy_from_slice(&v[..n]);
    let x = u64::from_le_bytes(b).wrapping_add(1);
    v[..n].copy_from_slice(&x.to_le_bytes()[..n]);
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub variant: String,
    pub tx: u64,
    pub tps: f64,
    pub page_fault_rate: f64,
    pub reads_issued: u64,
    pub writes_issued: u64,
    pub mean_batch: f64,
    /// Seconds of the measured phase; virtual seconds on the simulator.
    pub wall_time: f64,
    /// Host seconds spent in the measured phase, also on the simulator.
    pub cpu_time: f64,
    pub restarts: u64,
    pub warmup_tx: u64,
    /// Transactions executed by each fiber over warmup and measurement.
    pub tx_per_fiber: Vec<u64>,
    pub pool: PoolStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Warmup,
    Measure,
}

enum Clock {
    Virtual(VirtualClock),
    Wall(Instant),
}

impl Clock {
    fn now(&self) -> Duration {
        match self {
            Clock::Virtual(c) => c.now(),
            Clock::Wall(t) => t.elapsed(),
        }
    }
}

struct RunState {
    phase: Cell<Phase>,
    length: RunLength,
    clock: Clock,
    started: Cell<Duration>,
    measured: Cell<u64>,
    faulted: Cell<u64>,
    warm: Cell<u64>,
    error: RefCell<Option<WorkloadError>>,
    streams: Vec<RefCell<OpStream>>,
    done_per_fiber: Vec<Cell<u64>>,
}

impl RunState {
    fn finished(&self, pool: &BufferPool) -> bool {
        if self.error.borrow().is_some() {
            return true;
        }
        match self.phase.get() {
            Phase::Warmup => pool.resident() >= pool.frames().min(pool.page_count() as usize),
            Phase::Measure => match self.length {
                RunLength::Ops(n) => self.measured.get() >= n,
                RunLength::Duration(d) => self.clock.now() - self.started.get() >= d,
            },
        }
    }

    fn fail(&self, e: WorkloadError) {
        self.error.borrow_mut().get_or_insert(e);
    }
}

/// Charges `cycles` of transaction logic: spinning on real hardware, or
/// advancing virtual time when the simulator has a CPU model.
fn burn(sim: Option<&SimDeviceConfig>, cycles: u64) {
    if cycles == 0 {
        return;
    }
    match sim {
        Some(s) => {
            if let Some(cpu) = s.cpu {
                s.clock.advance_ns(cpu.cycles_to_ns(cycles));
            }
        }
        None => cycles::spin(cycles),
    }
}

fn ring_config(variant: Variant, target: &Target, depth: u32) -> Result<RingConfig, WorkloadError> {
    let unsupported = |reason: &str| WorkloadError::VariantUnsupported {
        variant,
        reason: reason.to_string(),
    };
    if let Some(sim) = &target.sim {
        if variant >= Variant::Passthru {
            return Err(unsupported("the simulated device has no NVMe command set or polling queues"));
        }
        return Ok(RingConfig::simulated(sim.clone()).depth(depth));
    }
    let mut cfg = match variant {
        Variant::PosixSync => RingConfig::with_backend(Backend::PosixSync),
        Variant::UringSync | Variant::BatchEvict | Variant::Fibers | Variant::BatchSubmit | Variant::RegBufs => {
            RingConfig::with_backend(Backend::UringDefault)
        }
        Variant::Passthru => RingConfig::with_backend(Backend::UringPassthrough),
        Variant::Iopoll => RingConfig {
            nvme_passthrough: true,
            ..RingConfig::with_backend(Backend::UringIopoll)
        },
        Variant::Sqpoll => RingConfig {
            nvme_passthrough: true,
            iopoll: true,
            ..RingConfig::with_backend(Backend::UringSqpoll)
        },
    };
    if variant >= Variant::Passthru && target.passthrough_dev.is_none() {
        return Err(unsupported("no NVMe character device for the database"));
    }
    cfg = cfg.depth(depth);
    Ok(cfg)
}

/// Runs the configured transactions through `variant` against a loaded database.
pub fn run(cfg: &WorkloadConfig, variant: Variant, target: &Target) -> Result<RunMetrics, WorkloadError> {
    cfg.validate()?;
    if cfg.ops == RunLength::Ops(0) {
        return Ok(RunMetrics {
            variant: variant.name().into(),
            ..RunMetrics::default()
        });
    }
    let fibers = variant.fibers(cfg.fibers);
    let depth = (fibers * 4).clamp(256, 4096).next_power_of_two() as u32;
    let ring_cfg = ring_config(variant, target, depth)?;
    let mut ring = RingHandle::new(&ring_cfg).map_err(|e| match e {
        RtError::UnsupportedBackend { .. } => WorkloadError::VariantUnsupported {
            variant,
            reason: e.to_string(),
        },
        e => e.into(),
    })?;

    let header = PageStore::new(StorageFile::open(&target.path, target.direct, false)?, cfg.page_size).read_header()?;
    if header.value_width as usize != cfg.value_width || header.page_size as usize != cfg.page_size {
        return Err(WorkloadError::Config(format!(
            "database has value width {} and page size {}, configuration says {} and {}",
            header.value_width, header.page_size, cfg.value_width, cfg.page_size
        )));
    }
    let mut store = match (variant >= Variant::Passthru, &target.passthrough_dev) {
        (true, Some(dev)) => {
            let mut s = PageStore::new(StorageFile::open(dev, false, false)?, cfg.page_size);
            s.io = PageIo::Passthrough;
            s
        }
        _ => PageStore::new(StorageFile::open(&target.path, target.direct, false)?, cfg.page_size),
    };

    let frames = cfg.frames();
    let min_frames = fibers * (header.height as usize + 1) + variant.evict_batch();
    if frames < min_frames {
        return Err(WorkloadError::Config(format!(
            "{frames} frames cannot serve {fibers} fibers on a tree of height {}; need at least {min_frames}",
            header.height
        )));
    }
    if variant >= Variant::RegBufs {
        ring.register_files(&[store.desc()])?;
        store.use_fixed_file(0);
    }
    let pool = Rc::new(BufferPool::new(
        PoolConfig {
            frames,
            evict_batch: variant.evict_batch(),
        },
        store,
        header.page_count,
    ));
    if variant >= Variant::RegBufs {
        pool.register_with(&mut ring)?;
    }
    let clock = match ring.sim_clock() {
        Some(c) => Clock::Virtual(c.clone()),
        None => Clock::Wall(Instant::now()),
    };
    let tree = Rc::new(BTree::open(pool.clone(), &header)?);
    let mut sched = Scheduler::new(
        ring,
        SchedConfig {
            max_fibers: fibers.max(1),
            max_batch: variant.max_batch(),
            ..SchedConfig::default()
        },
    );

    let state = Rc::new(RunState {
        phase: Cell::new(if cfg.warmup { Phase::Warmup } else { Phase::Measure }),
        length: cfg.ops,
        clock,
        started: Cell::new(Duration::ZERO),
        measured: Cell::new(0),
        faulted: Cell::new(0),
        warm: Cell::new(0),
        error: RefCell::new(None),
        streams: (0..fibers).map(|i| RefCell::new(OpStream::new(cfg, i))).collect(),
        done_per_fiber: (0..fibers).map(|_| Cell::new(0)).collect(),
    });
    let sim = target.sim.clone().map(Rc::new);

    if state.phase.get() == Phase::Warmup {
        run_phase(&mut sched, &tree, &state, &sim, cfg.compute_cycles_per_tx)?;
        state.phase.set(Phase::Measure);
    }
    pool.reset_stats();
    let restarts0 = tree.restarts();
    state.started.set(state.clock.now());
    let host = Instant::now();
    let report = run_phase(&mut sched, &tree, &state, &sim, cfg.compute_cycles_per_tx)?;
    let cpu_time = host.elapsed().as_secs_f64();
    let elapsed = (state.clock.now() - state.started.get()).as_secs_f64();
    let stats = pool.stats();
    let restarts = tree.restarts() - restarts0;

    // Persist the run so the file reflects every committed update.
    let flusher = pool.clone();
    let st = state.clone();
    sched.spawn(move |ctx| async move {
        if let Err(e) = flusher.flush_all(&ctx).await {
            st.fail(e.into());
        }
    })?;
    sched.run(Until::AllFinished)?;
    if let Some(e) = state.error.borrow_mut().take() {
        return Err(e);
    }

    let tx = state.measured.get();
    Ok(RunMetrics {
        variant: variant.name().into(),
        tx,
        tps: if elapsed > 0.0 { tx as f64 / elapsed } else { 0.0 },
        page_fault_rate: if tx == 0 {
            0.0
        } else {
            state.faulted.get() as f64 / tx as f64
        },
        reads_issued: stats.reads,
        writes_issued: stats.writes,
        mean_batch: report.mean_batch_size,
        wall_time: elapsed,
        cpu_time,
        restarts,
        warmup_tx: state.warm.get(),
        tx_per_fiber: state.done_per_fiber.iter().map(Cell::get).collect(),
        pool: stats,
    })
}

fn run_phase(
    sched: &mut Scheduler,
    tree: &Rc<BTree>,
    state: &Rc<RunState>,
    sim: &Option<Rc<SimDeviceConfig>>,
    compute: u64,
) -> Result<crate::fiber::SchedulerReport, WorkloadError> {
    for i in 0..state.streams.len() {
        let tree = tree.clone();
        let state = state.clone();
        let sim = sim.clone();
        sched.spawn(move |ctx| async move {
            if let Err(e) = fiber_loop(&ctx, i, &tree, &state, sim.as_deref(), compute).await {
                state.fail(e);
            }
        })?;
    }
    let report = sched.run(Until::AllFinished);
    if let Some(e) = state.error.borrow_mut().take() {
        return Err(e);
    }
    Ok(report?)
}

async fn fiber_loop(
    ctx: &IoCtx,
    i: usize,
    tree: &BTree,
    state: &RunState,
    sim: Option<&SimDeviceConfig>,
    compute: u64,
) -> Result<(), WorkloadError> {
    let mut scratch = vec![0u8; tree.value_width()];
    while !state.finished(tree.pool()) {
        let op = state.streams[i].borrow_mut().next().expect("endless stream");
        burn(sim, compute);
        let info = if op.update {
            tree.update_in_place(ctx, op.key, bump).await?.1
        } else {
            tree.lookup_into(ctx, op.key, &mut scratch).await?.1
        };
        ctx.complete_tx();
        state.done_per_fiber[i].set(state.done_per_fiber[i].get() + 1);
        match state.phase.get() {
            Phase::Warmup => state.warm.set(state.warm.get() + 1),
            Phase::Measure => {
                state.measured.set(state.measured.get() + 1);
                if info.faults > 0 {
                    state.faulted.set(state.faulted.get() + 1);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
