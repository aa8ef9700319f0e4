//! Asynchronous I/O runtime: one ring per thread with interchangeable backends.
//!
//! A [`RingHandle`] stages requests with [`RingHandle::enqueue`], hands the
//! staged batch to its backend with [`RingHandle::submit`] and collects
//! results with [`RingHandle::reap`]. Validation (flags, alignment,
//! registered tables) is identical for every backend, so a request rejected
//! on one backend for a structural reason is rejected on all of them.

mod config;
mod driver;
mod error;
mod request;
mod sim;
mod sync;
mod uring;

use std::time::Duration;

pub use config::{Backend, RingConfig, MAX_DEPTH};
pub use error::{Result, RtError};
pub use request::{
    logical_block_size, Buf, FileDesc, IoCompletion, IoKind, IoRequest, IoStatus, ReqFlags,
    StorageFile, Target, Ticket, DEFAULT_LOGICAL_BLOCK, MAX_STORAGE_REQUEST,
};
pub use sim::{SimCpuModel, SimDeviceConfig, VirtualClock};
pub use uring::{kernel_accepts, MAX_REGISTERED_BUFFERS, MAX_REGISTERED_FILES};

use driver::Driver;

pub const PAGE_SIZE: usize = 4096;

/// Largest single registered buffer accepted by the kernel.
pub const MAX_REGION_LEN: usize = 1 << 30;

/// A caller-owned memory region for buffer registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub ptr: *mut u8,
    pub len: usize,
}

// SAFETY: a region is an address range; access is governed by the ring contract.
unsafe impl Send for Region {}

impl Region {
    pub fn from_slice(s: &mut [u8]) -> Region {
        Region {
            ptr: s.as_mut_ptr(),
            len: s.len(),
        }
    }

    fn end(&self) -> usize {
        self.ptr as usize + self.len
    }
}

/// Registered buffers, indexed from 0.
#[derive(Debug, Clone, Default)]
pub struct BufferTable {
    regions: Vec<Region>,
}

impl BufferTable {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, index: u32) -> Option<Region> {
        self.regions.get(index as usize).copied()
    }

    /// A buffer descriptor for `len` bytes at `offset` inside region `index`.
    pub fn slice(&self, index: u32, offset: usize, len: usize) -> Result<Buf> {
        let r = self.region(index).ok_or(RtError::BadBufferIndex {
            index,
            registered: self.regions.len(),
        })?;
        if offset.checked_add(len).is_none_or(|end| end > r.len) {
            return Err(RtError::BadBufferIndex {
                index,
                registered: self.regions.len(),
            });
        }
        Ok(Buf::Fixed {
            index,
            // SAFETY: offset + len is within the region.
            ptr: unsafe { r.ptr.add(offset) },
            len,
        })
    }

    fn contains(&self, index: u32, ptr: *mut u8, len: usize) -> bool {
        self.region(index).is_some_and(|r| {
            let p = ptr as usize;
            p >= r.ptr as usize && p.checked_add(len).is_some_and(|end| end <= r.end())
        })
    }
}

/// Registered file handles, indexed from 0.
#[derive(Debug, Clone, Default)]
pub struct FileTable {
    files: Vec<FileDesc>,
}

impl FileTable {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn get(&self, index: u32) -> Option<FileDesc> {
        self.files.get(index as usize).copied()
    }

    pub fn target(&self, index: u32) -> Target {
        Target::Fixed(index)
    }
}

/// Counters kept by every ring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RingStats {
    pub enqueued: u64,
    /// Submit calls that handed at least one request to the backend.
    pub submits: u64,
    pub submitted: u64,
    pub completions: u64,
    pub reaps: u64,
}

impl RingStats {
    pub fn mean_batch(&self) -> f64 {
        if self.submits == 0 {
            0.0
        } else {
            self.submitted as f64 / self.submits as f64
        }
    }
}

/// One submission/completion queue pair and its backend.
pub struct RingHandle {
    cfg: RingConfig,
    driver: Box<dyn Driver>,
    next_ticket: u64,
    last_staged_links: bool,
    buffers: BufferTable,
    files: FileTable,
    /// Submitted or staged requests without a final completion.
    outstanding: usize,
    /// Live multishot requests by tag.
    multishot_live: std::collections::HashMap<u64, usize>,
    stats: RingStats,
    sim_clock: Option<VirtualClock>,
    #[cfg(debug_assertions)]
    owner: std::thread::ThreadId,
}

/// Creates a ring for `config`. Depths are rounded up to powers of two.
pub fn ring_create(config: &RingConfig) -> Result<RingHandle> {
    RingHandle::new(config)
}

impl RingHandle {
    pub fn new(config: &RingConfig) -> Result<RingHandle> {
        let cfg = config.normalized()?;
        let mut sim_clock = None;
        let driver: Box<dyn Driver> = match cfg.backend {
            Backend::Simulated => {
                let d = sim::SimDriver::new(cfg.sim.clone());
                sim_clock = Some(d.clock().clone());
                Box::new(d)
            }
            Backend::PosixSync => Box::new(sync::SyncDriver::new()),
            Backend::UringPassthrough => Box::new(uring::UringDriver::<uring::Wide>::new(&cfg)?),
            _ if cfg.nvme_passthrough => Box::new(uring::UringDriver::<uring::Wide>::new(&cfg)?),
            _ => Box::new(uring::UringDriver::<uring::Standard>::new(&cfg)?),
        };
        Ok(RingHandle {
            cfg,
            driver,
            next_ticket: 0,
            last_staged_links: false,
            buffers: BufferTable::default(),
            files: FileTable::default(),
            outstanding: 0,
            multishot_live: Default::default(),
            stats: RingStats::default(),
            sim_clock,
            #[cfg(debug_assertions)]
            owner: std::thread::current().id(),
        })
    }

    pub fn config(&self) -> &RingConfig {
        &self.cfg
    }

    pub fn backend(&self) -> Backend {
        self.cfg.backend
    }

    pub fn capacity(&self) -> usize {
        self.cfg.sq_depth as usize
    }

    pub fn staged(&self) -> usize {
        self.driver.staged()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub fn stats(&self) -> RingStats {
        self.stats
    }

    pub fn buffers(&self) -> &BufferTable {
        &self.buffers
    }

    pub fn files(&self) -> &FileTable {
        &self.files
    }

    /// Virtual clock of a simulated ring.
    pub fn sim_clock(&self) -> Option<&VirtualClock> {
        self.sim_clock.as_ref()
    }

    /// Moves ownership to the calling thread after the handle was sent.
    pub fn rebind(&mut self) {
        #[cfg(debug_assertions)]
        {
            self.owner = std::thread::current().id();
        }
    }

    #[inline]
    fn check_owner(&self) {
        #[cfg(debug_assertions)]
        debug_assert_eq!(
            self.owner,
            std::thread::current().id(),
            "ring used from a thread other than its owner"
        );
    }

    /// Whether this backend can execute `kind` with default flags.
    pub fn supports_kind(&self, kind: IoKind) -> bool {
        self.driver
            .supports(&IoRequest::new(kind, Target::Fd(FileDesc::buffered(-1))))
    }

    /// Stages `req` and returns its ticket.
    ///
    /// # Safety
    ///
    /// Every buffer referenced by `req` must stay valid, and must not be
    /// accessed in a conflicting way, until the request's final completion
    /// has been reaped.
    pub unsafe fn enqueue(&mut self, req: IoRequest) -> Result<Ticket> {
        self.check_owner();
        req.check_flags().map_err(RtError::InvalidFlags)?;
        if req.flags.link_timeout_us.is_some() && !self.last_staged_links {
            return Err(RtError::InvalidFlags(
                "link timeout requires a preceding request linked to this one",
            ));
        }
        if !self.driver.supports(&req) {
            return Err(RtError::KindUnsupportedByBackend {
                kind: req.kind.name(),
                backend: self.driver.name(),
            });
        }
        let desc = match req.target {
            Target::Fd(d) => d,
            Target::Fixed(index) => self.files.get(index).ok_or(RtError::BadFileIndex {
                index,
                registered: self.files.len(),
            })?,
        };
        if let Buf::Fixed { index, ptr, len } = req.buf {
            if !self.buffers.contains(index, ptr, len) {
                return Err(RtError::BadBufferIndex {
                    index,
                    registered: self.buffers.len(),
                });
            }
        }
        if req.kind.is_positioned() {
            let len = req.buf.len();
            if len > MAX_STORAGE_REQUEST {
                return Err(RtError::RequestTooLarge {
                    len,
                    max: MAX_STORAGE_REQUEST,
                });
            }
            match desc.direct_block {
                Some(block) => {
                    let b = block as u64;
                    if req.offset % b != 0 || len as u64 % b != 0 || req.buf.ptr() as u64 % b != 0
                    {
                        return Err(RtError::Misaligned {
                            offset: req.offset,
                            len,
                            block,
                        });
                    }
                }
                None if self.cfg.iopoll || self.cfg.backend == Backend::UringIopoll => {
                    return Err(RtError::InvalidFlags(
                        "completion polling requires direct-I/O handles",
                    ));
                }
                None => {}
            }
        }
        if self.driver.staged() >= self.capacity() {
            return Err(RtError::SqFull);
        }
        self.driver.stage(&req, desc)?;
        self.last_staged_links = req.flags.link_next;
        self.outstanding += 1;
        if req.flags.multishot {
            *self.multishot_live.entry(req.tag).or_default() += 1;
        }
        self.stats.enqueued += 1;
        let t = Ticket(self.next_ticket);
        self.next_ticket += 1;
        Ok(t)
    }

    /// Hands all staged requests to the backend in one step.
    pub fn submit(&mut self) -> Result<usize> {
        self.check_owner();
        if self.driver.staged() == 0 {
            return Ok(0);
        }
        let n = self.driver.submit()?;
        self.last_staged_links = false;
        self.stats.submits += 1;
        self.stats.submitted += n as u64;
        Ok(n)
    }

    /// Appends between `min` and `max` completions to `out`.
    ///
    /// With `min == 0` this never blocks. Without a timeout, asking for more
    /// completions than can ever arrive fails with `TimedOut` instead of
    /// blocking forever.
    pub fn reap_into(
        &mut self,
        out: &mut Vec<IoCompletion>,
        min: usize,
        max: usize,
        timeout: Option<Duration>,
    ) -> Result<usize> {
        self.check_owner();
        let max = max.max(min);
        let submitted_outstanding = self.outstanding - self.driver.staged();
        let start = out.len();
        let res = if timeout.is_none() && self.multishot_live.is_empty() && min > submitted_outstanding {
            // Collect what is there, then report the shortfall.
            let r = self.driver.reap(out, 0, max, None);
            r.and(Err(RtError::TimedOut {
                wanted: min,
                got: out.len() - start,
            }))
        } else {
            self.driver.reap(out, min, max, timeout)
        };
        let got = out.len() - start;
        self.account(&out[start..]);
        self.stats.reaps += 1;
        match res {
            Err(RtError::TimedOut { wanted, .. }) => Err(RtError::TimedOut { wanted, got }),
            Err(e) => Err(e),
            Ok(()) => Ok(got),
        }
    }

    pub fn reap(
        &mut self,
        min: usize,
        max: usize,
        timeout: Option<Duration>,
    ) -> Result<Vec<IoCompletion>> {
        let mut out = Vec::new();
        self.reap_into(&mut out, min, max, timeout)?;
        Ok(out)
    }

    fn account(&mut self, done: &[IoCompletion]) {
        for c in done {
            self.stats.completions += 1;
            if c.more_coming {
                continue;
            }
            self.outstanding -= 1;
            if let Some(n) = self.multishot_live.get_mut(&c.tag) {
                *n -= 1;
                if *n == 0 {
                    self.multishot_live.remove(&c.tag);
                }
            }
        }
    }

    /// Registers `regions` as fixed buffers, replacing any previous table.
    ///
    /// # Safety
    ///
    /// The regions must stay valid until they are replaced or the ring drops.
    pub unsafe fn register_buffers(&mut self, regions: &[Region]) -> Result<&BufferTable> {
        self.check_owner();
        if regions.len() > MAX_REGISTERED_BUFFERS {
            return Err(RtError::TooManyRegions(regions.len()));
        }
        for (i, r) in regions.iter().enumerate() {
            if r.ptr as usize % PAGE_SIZE != 0 || r.len == 0 || r.len > MAX_REGION_LEN {
                return Err(RtError::NotAligned { index: i });
            }
        }
        let mut sorted: Vec<(usize, Region)> = regions.iter().copied().enumerate().collect();
        sorted.sort_by_key(|(_, r)| r.ptr as usize);
        for w in sorted.windows(2) {
            if w[0].1.end() > w[1].1.ptr as usize {
                return Err(RtError::Overlapping(w[0].0, w[1].0));
            }
        }
        self.driver.register_buffers(regions)?;
        self.buffers = BufferTable {
            regions: regions.to_vec(),
        };
        Ok(&self.buffers)
    }

    /// Registers file or socket handles, replacing any previous table.
    pub fn register_files(&mut self, files: &[FileDesc]) -> Result<&FileTable> {
        self.check_owner();
        if files.len() > MAX_REGISTERED_FILES {
            return Err(RtError::TooManyFiles(files.len()));
        }
        self.driver.register_files(files)?;
        self.files = FileTable {
            files: files.to_vec(),
        };
        Ok(&self.files)
    }

    /// Sets up a provided-buffer ring of `entries` buffers of `buf_len` bytes.
    pub fn setup_buf_ring(&mut self, group: u16, entries: u16, buf_len: u32) -> Result<()> {
        self.check_owner();
        self.driver.setup_buf_ring(group, entries, buf_len)
    }

    /// The bytes of provided buffer `bid` after a receive selected it.
    pub fn provided_buffer(&mut self, group: u16, bid: u16, len: usize) -> Option<&[u8]> {
        let p = self.driver.provided_buffer(group, bid)?;
        // SAFETY: the buffer is owned by the driver and not recycled yet.
        Some(unsafe { std::slice::from_raw_parts(p, len) })
    }

    /// Returns a provided buffer to the kernel.
    pub fn recycle_buffer(&mut self, group: u16, bid: u16) {
        self.driver.recycle_buffer(group, bid)
    }
}
