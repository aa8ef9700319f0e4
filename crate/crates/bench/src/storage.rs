//! Storage microbenchmarks: paced write latency, block-size sweep and
//! durable-write variants.

use std::fmt;
use std::io::{Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uring_engine::bufmgr::AlignedPage;
use uring_engine::cycles;
use uring_engine::rt::{
    Backend, Buf, FileDesc, IoCompletion, IoKind, IoRequest, Region, RingConfig, RingHandle,
    StorageFile, Target, MAX_STORAGE_REQUEST,
};
use uring_engine::workload::passthrough_char_device;

use crate::error::{BenchError, Result};
use crate::rows::Rows;
use crate::util::{cpu_cycles, cycles_to_us, fmt_size, is_unsupported, mean_stddev, process_cpu};

pub const DEVICE_ENV: &str = "URING_ENGINE_DEVICE";

/// The explicit device, else the one named by `URING_ENGINE_DEVICE`.
pub fn resolve_device(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DEVICE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

fn no_device() -> String {
    format!("no device (set {DEVICE_ENV} or pass --device)")
}

struct Device {
    path: PathBuf,
    file: StorageFile,
    block: u32,
    /// Usable bytes, a multiple of the logical block.
    len: u64,
}

fn open_device(path: &Path, osync: bool) -> Result<Device> {
    let unavailable = |e: std::io::Error| BenchError::DeviceUnavailable {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let file = if osync {
        StorageFile::open_osync(path, true)
    } else {
        StorageFile::open(path, true, false)
    }
    .map_err(unavailable)?;
    let block = file.desc().direct_block.unwrap_or(512);
    let len = (&*file.file()).seek(SeekFrom::End(0)).map_err(unavailable)?;
    Ok(Device {
        path: path.to_path_buf(),
        len: len / block as u64 * block as u64,
        file,
        block,
    })
}

/// Random block-aligned offset of a `len`-byte request inside the device.
fn random_offset(rng: &mut ChaCha8Rng, dev_len: u64, len: u64) -> u64 {
    let slots = dev_len / len;
    rng.gen_range(0..slots) * len
}

// ---------------------------------------------------------------------------
// Write latency under paced load.

#[derive(Debug, Clone)]
pub struct WriteLatencyConfig {
    pub batch_sizes: Vec<usize>,
    /// Total request rate across all workers.
    pub target_iops: u64,
    pub device: Option<PathBuf>,
    pub workers: usize,
    /// Requests per batch size, across all workers.
    pub requests: u64,
    pub block: usize,
    pub seed: u64,
}

impl Default for WriteLatencyConfig {
    fn default() -> Self {
        WriteLatencyConfig {
            batch_sizes: vec![1, 8, 32, 64, 128],
            target_iops: 1_500_000,
            device: None,
            workers: 8,
            requests: 400_000,
            block: 4096,
            seed: 1,
        }
    }
}

/// Issues `n` writes in batches of `batch`, releasing one batch whenever the
/// token bucket holds `batch` tokens. Returns per-request latency in microseconds.
fn paced_writes(dev: &Device, batch: usize, rate: f64, n: usize, block: usize, seed: u64) -> Result<Vec<f64>> {
    let depth = (batch * 4).max(64).next_power_of_two().min(4096);
    let mut ring = RingHandle::new(&RingConfig::default().depth(depth as u32))?;
    let mut buf = AlignedPage::new(block);
    buf.as_mut().fill(0x5a);
    let src = Buf::from_slice(buf.as_mut());
    let desc = dev.file.desc();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interval = batch as f64 / rate * cycles::clock().hz;
    let mut next_release = cycles::now() as f64;
    let mut submitted_at = vec![0u64; n];
    let mut lat = Vec::with_capacity(n);
    let mut done: Vec<IoCompletion> = Vec::with_capacity(depth);
    let mut issued = 0;
    while lat.len() < n {
        let now = cycles::now();
        if issued < n && now as f64 >= next_release && ring.outstanding() + batch <= ring.capacity() {
            let b = batch.min(n - issued);
            for k in 0..b {
                let off = random_offset(&mut rng, dev.len, block as u64);
                // SAFETY: `buf` outlives the ring's use of it; all writes are reaped below.
                unsafe { ring.enqueue(IoRequest::write(desc, off, src).tag((issued + k) as u64)) }?;
            }
            let t = cycles::now();
            ring.submit()?;
            submitted_at[issued..issued + b].fill(t);
            issued += b;
            next_release += interval;
        }
        done.clear();
        ring.reap_into(&mut done, 0, depth, None)?;
        let t = cycles::now();
        for c in &done {
            c.into_result()?;
            lat.push(cycles_to_us(t - submitted_at[c.tag as usize]));
        }
    }
    Ok(lat)
}

pub fn bench_write_latency(cfg: &WriteLatencyConfig, rows: &mut Rows) -> Result<()> {
    if cfg.target_iops == 0 {
        return Err(BenchError::Config("target_iops must be positive".into()));
    }
    if cfg.workers == 0 || cfg.batch_sizes.contains(&0) || cfg.block == 0 {
        return Err(BenchError::Config("workers, batch sizes and block must be positive".into()));
    }
    let Some(path) = resolve_device(cfg.device.as_deref()) else {
        for &b in &cfg.batch_sizes {
            rows.skip("write-latency", "paced", b, "mean_us", no_device());
            rows.skip("write-latency", "paced", b, "stddev_us", no_device());
        }
        return Ok(());
    };
    let dev = open_device(&path, false)?;
    if cfg.block % dev.block as usize != 0 || dev.len < cfg.block as u64 {
        return Err(BenchError::Config(format!(
            "block {} does not fit logical block {} of {}",
            cfg.block,
            dev.block,
            dev.path.display()
        )));
    }
    let per_worker = (cfg.requests as usize).div_ceil(cfg.workers);
    let rate = cfg.target_iops as f64 / cfg.workers as f64;
    for &b in &cfg.batch_sizes {
        let t0 = Instant::now();
        let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..cfg.workers)
                .map(|w| {
                    let dev = &dev;
                    s.spawn(move || paced_writes(dev, b, rate, per_worker, cfg.block, cfg.seed ^ ((w as u64) << 32)))
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("writer panicked")).collect()
        });
        let wall = t0.elapsed().as_secs_f64();
        let mut all = Vec::new();
        for r in results {
            all.extend(r?);
        }
        let (mean, sd) = mean_stddev(&all);
        rows.num("write-latency", "paced", b, "mean_us", mean);
        rows.num("write-latency", "paced", b, "stddev_us", sd);
        rows.num("write-latency", "paced", b, "iops", all.len() as f64 / wall);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Block-size sweep.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    Default,
    RegBufs,
    Passthru,
    Iopoll,
}

impl BlockMode {
    pub const ALL: [BlockMode; 4] = [BlockMode::Default, BlockMode::RegBufs, BlockMode::Passthru, BlockMode::Iopoll];

    pub fn name(self) -> &'static str {
        match self {
            BlockMode::Default => "default",
            BlockMode::RegBufs => "+reg-bufs",
            BlockMode::Passthru => "+passthru",
            BlockMode::Iopoll => "+iopoll",
        }
    }
}

impl fmt::Display for BlockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let want = s.trim_start_matches('+');
        BlockMode::ALL
            .into_iter()
            .find(|m| m.name().trim_start_matches('+') == want)
            .ok_or_else(|| format!("unknown block mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rw {
    Read,
    Write,
}

impl FromStr for Rw {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "read" => Ok(Rw::Read),
            "write" => Ok(Rw::Write),
            _ => Err(format!("expected read or write, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlocksizeConfig {
    pub block_sizes: Vec<u64>,
    pub modes: Vec<BlockMode>,
    pub rw: Rw,
    pub device: Option<PathBuf>,
    pub bytes_per_point: u64,
    /// Logical blocks kept in flight.
    pub depth: usize,
    pub seed: u64,
}

impl Default for BlocksizeConfig {
    fn default() -> Self {
        BlocksizeConfig {
            block_sizes: (12..=23).map(|s| 1u64 << s).collect(),
            modes: BlockMode::ALL.to_vec(),
            rw: Rw::Read,
            device: None,
            bytes_per_point: 1 << 30,
            depth: 16,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub cycles_per_byte: f64,
    pub gib_per_s: f64,
    /// Ring requests per logical block.
    pub split: usize,
}

fn mode_ring(mode: BlockMode, depth: u32) -> RingConfig {
    let mut cfg = match mode {
        BlockMode::Default | BlockMode::RegBufs => RingConfig::default(),
        BlockMode::Passthru => RingConfig::with_backend(Backend::UringPassthrough),
        BlockMode::Iopoll => RingConfig::with_backend(Backend::UringIopoll),
    };
    cfg.sq_depth = depth;
    cfg
}

/// One point of the sweep: `bytes` in blocks of `bs`, `depth` blocks in flight.
fn sweep_point(dev: &Device, target: FileDesc, mode: BlockMode, rw: Rw, bs: u64, bytes: u64, depth: usize, seed: u64) -> Result<SweepPoint> {
    let split = (bs as usize).div_ceil(MAX_STORAGE_REQUEST);
    let chunk = (bs as usize).min(MAX_STORAGE_REQUEST);
    let ring_depth = (depth * split).next_power_of_two() as u32;
    let mut ring = RingHandle::new(&mode_ring(mode, ring_depth))?;
    let mut arena = AlignedPage::new(depth * bs as usize);
    arena.as_mut().fill(0xa5);
    let base = arena.as_mut().as_mut_ptr();
    if mode == BlockMode::RegBufs {
        // SAFETY: `arena` outlives the ring.
        unsafe { ring.register_buffers(&[Region::from_slice(arena.as_mut())]) }?;
    }
    let kind = match (mode, rw) {
        (BlockMode::Passthru, Rw::Read) => IoKind::NvmeRead,
        (BlockMode::Passthru, Rw::Write) => IoKind::NvmeWrite,
        (_, Rw::Read) => IoKind::Read,
        (_, Rw::Write) => IoKind::Write,
    };
    let blocks = (bytes / bs).max(1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending = vec![0usize; depth];
    let mut done: Vec<IoCompletion> = Vec::with_capacity(ring_depth as usize);
    let mut started = 0;
    let mut finished = 0;
    let t0 = Instant::now();
    let c0 = process_cpu();
    let mut issue = |ring: &mut RingHandle, slot: usize, pending: &mut [usize]| -> Result<()> {
        let off = random_offset(&mut rng, dev.len, bs);
        for piece in 0..split {
            let at = piece * chunk;
            let len = chunk.min(bs as usize - at);
            let slot_off = slot * bs as usize + at;
            let buf = if mode == BlockMode::RegBufs {
                ring.buffers().slice(0, slot_off, len)?
            } else {
                // SAFETY: inside `arena`.
                Buf::Raw { ptr: unsafe { base.add(slot_off) }, len }
            };
            let req = IoRequest {
                offset: off + at as u64,
                buf,
                tag: slot as u64,
                ..IoRequest::new(kind, Target::Fd(target))
            };
            // SAFETY: slot buffers stay untouched until the slot's pieces are reaped.
            unsafe { ring.enqueue(req) }?;
        }
        pending[slot] = split;
        Ok(())
    };
    for slot in 0..depth.min(blocks) {
        issue(&mut ring, slot, &mut pending)?;
        started += 1;
    }
    ring.submit()?;
    while finished < blocks {
        done.clear();
        ring.reap_into(&mut done, 1, ring_depth as usize, None)?;
        for c in &done {
            c.into_result()?;
            let slot = c.tag as usize;
            pending[slot] -= 1;
            if pending[slot] == 0 {
                finished += 1;
                if started < blocks {
                    issue(&mut ring, slot, &mut pending)?;
                    started += 1;
                }
            }
        }
        ring.submit()?;
    }
    let cpu = process_cpu() - c0;
    let wall = t0.elapsed().as_secs_f64();
    let moved = blocks as f64 * bs as f64;
    Ok(SweepPoint {
        cycles_per_byte: cpu_cycles(cpu) / moved,
        gib_per_s: moved / (1u64 << 30) as f64 / wall,
        split,
    })
}

pub fn bench_blocksize(cfg: &BlocksizeConfig, rows: &mut Rows) -> Result<()> {
    if cfg.depth == 0 {
        return Err(BenchError::Config("depth must be positive".into()));
    }
    let dev = resolve_device(cfg.device.as_deref()).map(|p| open_device(&p, false)).transpose()?;
    let lblock = dev.as_ref().map_or(512, |d| d.block as u64);
    if let Some(&bad) = cfg.block_sizes.iter().find(|&&b| b == 0 || b % lblock != 0) {
        return Err(BenchError::Config(format!("block size {bad} is not a multiple of the {lblock} byte logical block")));
    }
    let bench = match cfg.rw {
        Rw::Read => "blocksize-read",
        Rw::Write => "blocksize-write",
    };
    let skip_both = |rows: &mut Rows, mode: BlockMode, bs: u64, why: &str| {
        rows.skip(bench, mode.name(), fmt_size(bs), "cycles_per_byte", why);
        rows.skip(bench, mode.name(), fmt_size(bs), "gib_per_s", why);
    };
    let Some(dev) = dev else {
        for &mode in &cfg.modes {
            for &bs in &cfg.block_sizes {
                skip_both(rows, mode, bs, &no_device());
            }
        }
        return Ok(());
    };
    let char_dev = passthrough_char_device(&dev.path);
    for &mode in &cfg.modes {
        let target = match (mode, &char_dev) {
            (BlockMode::Passthru, None) => {
                for &bs in &cfg.block_sizes {
                    skip_both(rows, mode, bs, &format!("unsupported: no NVMe character device for {}", dev.path.display()));
                }
                continue;
            }
            (BlockMode::Passthru, Some(ng)) => match std::fs::OpenOptions::new().read(true).write(true).open(ng) {
                Ok(f) => {
                    let fd = std::os::fd::IntoRawFd::into_raw_fd(f);
                    FileDesc { fd, direct_block: Some(dev.block) }
                }
                Err(e) => {
                    for &bs in &cfg.block_sizes {
                        skip_both(rows, mode, bs, &format!("unsupported: {}: {e}", ng.display()));
                    }
                    continue;
                }
            },
            _ => dev.file.desc(),
        };
        for &bs in &cfg.block_sizes {
            let param = fmt_size(bs);
            if bs > dev.len {
                skip_both(rows, mode, bs, "block larger than the device");
                continue;
            }
            if mode == BlockMode::Passthru && bs as usize > MAX_STORAGE_REQUEST {
                skip_both(rows, mode, bs, "unsupported: passthrough commands are limited to 512 KiB");
                continue;
            }
            if bs as usize > MAX_STORAGE_REQUEST {
                rows.num(bench, mode.name(), &param, "split_factor", (bs as usize).div_ceil(MAX_STORAGE_REQUEST) as f64);
            }
            match sweep_point(&dev, target, mode, cfg.rw, bs, cfg.bytes_per_point, cfg.depth, cfg.seed) {
                Ok(p) => {
                    rows.num(bench, mode.name(), &param, "cycles_per_byte", p.cycles_per_byte);
                    rows.num(bench, mode.name(), &param, "gib_per_s", p.gib_per_s);
                }
                Err(BenchError::Ring(e)) if is_unsupported(&e) => skip_both(rows, mode, bs, &format!("unsupported: {e}")),
                Err(e) => return Err(e),
            }
        }
        if mode == BlockMode::Passthru {
            // SAFETY: opened above and no longer referenced by any ring.
            unsafe { libc::close(target.fd) };
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Durable writes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurableVariant {
    WriteThenFsync,
    LinkedWriteFsync,
    OsyncWrite,
    PassthruWriteFlush,
    PassthruIopollWrite,
}

impl DurableVariant {
    pub const ALL: [DurableVariant; 5] = [
        DurableVariant::WriteThenFsync,
        DurableVariant::LinkedWriteFsync,
        DurableVariant::OsyncWrite,
        DurableVariant::PassthruWriteFlush,
        DurableVariant::PassthruIopollWrite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DurableVariant::WriteThenFsync => "write-then-fsync",
            DurableVariant::LinkedWriteFsync => "linked-write-fsync",
            DurableVariant::OsyncWrite => "osync-write",
            DurableVariant::PassthruWriteFlush => "passthru-write-flush",
            DurableVariant::PassthruIopollWrite => "passthru-iopoll-write",
        }
    }

    fn passthru(self) -> bool {
        matches!(self, DurableVariant::PassthruWriteFlush | DurableVariant::PassthruIopollWrite)
    }
}

impl FromStr for DurableVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        DurableVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown durable variant `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct DurableConfig {
    pub variants: Vec<DurableVariant>,
    pub device: Option<PathBuf>,
    pub samples: usize,
    pub block: usize,
    pub seed: u64,
}

impl Default for DurableConfig {
    fn default() -> Self {
        DurableConfig {
            variants: DurableVariant::ALL.to_vec(),
            device: None,
            samples: 2000,
            block: 4096,
            seed: 3,
        }
    }
}

fn durable_latencies(path: &Path, v: DurableVariant, cfg: &DurableConfig) -> Result<Vec<f64>> {
    let unsupported = |reason: String| BenchError::VariantUnsupported {
        variant: v.name().into(),
        reason,
    };
    let dev = open_device(path, v == DurableVariant::OsyncWrite)?;
    if cfg.block as u64 % dev.block as u64 != 0 || dev.len < cfg.block as u64 {
        return Err(BenchError::Config(format!("block {} does not fit {}", cfg.block, path.display())));
    }
    let (ring_cfg, target) = if v.passthru() {
        let ng = passthrough_char_device(path)
            .ok_or_else(|| unsupported(format!("no NVMe character device for {}", path.display())))?;
        let f = std::fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(&ng)
            .map_err(|e| unsupported(format!("{}: {e}", ng.display())))?;
        let mut rc = RingConfig::with_backend(Backend::UringPassthrough);
        rc.iopoll = v == DurableVariant::PassthruIopollWrite;
        let desc = FileDesc {
            fd: std::os::fd::IntoRawFd::into_raw_fd(f),
            direct_block: Some(dev.block),
        };
        (rc, desc)
    } else {
        (RingConfig::default(), dev.file.desc())
    };
    let close_target = |t: FileDesc| {
        if v.passthru() {
            // SAFETY: owned descriptor opened above.
            unsafe { libc::close(t.fd) };
        }
    };
    let mut ring = match RingHandle::new(&ring_cfg.depth(8)) {
        Ok(r) => r,
        Err(e) => {
            close_target(target);
            return Err(if is_unsupported(&e) { unsupported(e.to_string()) } else { e.into() });
        }
    };
    let mut buf = AlignedPage::new(cfg.block);
    buf.as_mut().fill(0x3c);
    let src = Buf::from_slice(buf.as_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lat = Vec::with_capacity(cfg.samples);
    let mut done = Vec::with_capacity(4);
    let res = (|| -> Result<()> {
        for _ in 0..cfg.samples {
            let off = random_offset(&mut rng, dev.len, cfg.block as u64);
            let t0 = cycles::now();
            let mut step = |ring: &mut RingHandle, reqs: &[IoRequest]| -> Result<()> {
                for r in reqs {
                    // SAFETY: `buf` outlives every request; each step reaps all it staged.
                    unsafe { ring.enqueue(*r) }?;
                }
                ring.submit()?;
                done.clear();
                ring.reap_into(&mut done, reqs.len(), reqs.len(), None)?;
                for c in &done {
                    c.into_result()?;
                }
                Ok(())
            };
            let w = IoRequest::write(target, off, src);
            match v {
                DurableVariant::WriteThenFsync => {
                    step(&mut ring, &[w])?;
                    step(&mut ring, &[IoRequest::fsync(target, false)])?;
                }
                DurableVariant::LinkedWriteFsync => step(&mut ring, &[w.link_next(), IoRequest::fsync(target, false)])?,
                DurableVariant::OsyncWrite => step(&mut ring, &[w])?,
                DurableVariant::PassthruWriteFlush => {
                    let nw = IoRequest { kind: IoKind::NvmeWrite, ..w };
                    step(&mut ring, &[nw])?;
                    step(&mut ring, &[IoRequest::new(IoKind::NvmeFlush, Target::Fd(target))])?;
                }
                DurableVariant::PassthruIopollWrite => step(&mut ring, &[IoRequest { kind: IoKind::NvmeWrite, ..w }])?,
            }
            lat.push(cycles_to_us(cycles::now() - t0));
        }
        Ok(())
    })();
    drop(ring);
    close_target(target);
    res.map(|_| lat)
}

pub fn bench_durable(cfg: &DurableConfig, rows: &mut Rows) -> Result<()> {
    if cfg.samples == 0 || cfg.block == 0 {
        return Err(BenchError::Config("samples and block must be positive".into()));
    }
    let Some(path) = resolve_device(cfg.device.as_deref()) else {
        for v in &cfg.variants {
            rows.skip("durable", v.name(), fmt_size(cfg.block as u64), "mean_us", no_device());
        }
        return Ok(());
    };
    for &v in &cfg.variants {
        let param = fmt_size(cfg.block as u64);
        match durable_latencies(&path, v, cfg) {
            Ok(lat) => {
                let (mean, sd) = mean_stddev(&lat);
                rows.num("durable", v.name(), &param, "mean_us", mean);
                rows.num("durable", v.name(), &param, "stddev_us", sd);
            }
            Err(e @ BenchError::VariantUnsupported { .. }) => {
                log::warn!("{e}");
                rows.skip("durable", v.name(), &param, "mean_us", e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn scratch(bytes: usize) -> tempfile::NamedTempFile {
        let mut t = tempfile::NamedTempFile::new_in(std::env::temp_dir()).unwrap();
        t.write_all(&vec![1u8; bytes]).unwrap();
        t.flush().unwrap();
        t
    }

    fn direct_io_works(path: &Path) -> bool {
        StorageFile::open(path, true, false).is_ok() && RingHandle::new(&RingConfig::default()).is_ok()
    }

    #[test]
    fn zero_iops_is_a_config_error() {
        let cfg = WriteLatencyConfig {
            target_iops: 0,
            ..WriteLatencyConfig::default()
        };
        let mut rows = Rows::new("h".into());
        assert!(matches!(bench_write_latency(&cfg, &mut rows), Err(BenchError::Config(_))));
    }

    #[test]
    fn misaligned_block_is_a_config_error() {
        let cfg = BlocksizeConfig {
            block_sizes: vec![4096, 1000],
            ..BlocksizeConfig::default()
        };
        let mut rows = Rows::new("h".into());
        assert!(matches!(bench_blocksize(&cfg, &mut rows), Err(BenchError::Config(_))));
    }

    #[test]
    fn missing_device_opens_nothing() {
        let cfg = BlocksizeConfig {
            device: Some("/nonexistent/device".into()),
            ..BlocksizeConfig::default()
        };
        let mut rows = Rows::new("h".into());
        assert!(matches!(bench_blocksize(&cfg, &mut rows), Err(BenchError::DeviceUnavailable { .. })));
    }

    #[test]
    fn blocksize_sweep_on_a_file() {
        let f = scratch(8 << 20);
        if !direct_io_works(f.path()) {
            return;
        }
        let cfg = BlocksizeConfig {
            block_sizes: vec![4096, 1 << 20],
            modes: vec![BlockMode::Default, BlockMode::RegBufs, BlockMode::Passthru],
            device: Some(f.path().to_path_buf()),
            bytes_per_point: 4 << 20,
            depth: 4,
            ..BlocksizeConfig::default()
        };
        let mut rows = Rows::new("h".into());
        bench_blocksize(&cfg, &mut rows).unwrap();
        for mode in ["default", "+reg-bufs"] {
            for bs in ["4KiB", "1MiB"] {
                let r = rows.find("blocksize-read", mode, bs, "gib_per_s").unwrap();
                assert!(r.value.num().unwrap() > 0.0, "{mode} {bs}");
            }
            let split = rows.find("blocksize-read", mode, "1MiB", "split_factor").unwrap();
            assert_eq!(split.value.num(), Some(2.0));
        }
        let p = rows.find("blocksize-read", "+passthru", "1MiB", "cycles_per_byte").unwrap();
        assert!(matches!(&p.value, crate::rows::Value::Skipped(r) if r.starts_with("unsupported")));
    }

    #[test]
    fn durable_isolates_unsupported_variants() {
        let f = scratch(1 << 20);
        if !direct_io_works(f.path()) {
            return;
        }
        let cfg = DurableConfig {
            device: Some(f.path().to_path_buf()),
            samples: 20,
            ..DurableConfig::default()
        };
        let mut rows = Rows::new("h".into());
        bench_durable(&cfg, &mut rows).unwrap();
        for v in ["write-then-fsync", "linked-write-fsync", "osync-write"] {
            assert!(rows.find("durable", v, "4KiB", "mean_us").unwrap().value.num().unwrap() > 0.0, "{v}");
        }
        for v in ["passthru-write-flush", "passthru-iopoll-write"] {
            let r = rows.find("durable", v, "4KiB", "mean_us").unwrap();
            assert!(matches!(&r.value, crate::rows::Value::Skipped(s) if s.contains("unsupported")), "{v}");
        }
    }

    #[test]
    fn paced_writes_on_a_file() {
        let f = scratch(4 << 20);
        if !direct_io_works(f.path()) {
            return;
        }
        let cfg = WriteLatencyConfig {
            batch_sizes: vec![1, 8],
            target_iops: 20_000,
            device: Some(f.path().to_path_buf()),
            workers: 2,
            requests: 400,
            ..WriteLatencyConfig::default()
        };
        let mut rows = Rows::new("h".into());
        bench_write_latency(&cfg, &mut rows).unwrap();
        for b in ["1", "8"] {
            assert!(rows.find("write-latency", "paced", b, "mean_us").unwrap().value.num().unwrap() > 0.0);
            assert!(rows.find("write-latency", "paced", b, "stddev_us").unwrap().value.num().is_some());
        }
    }
}
