//! Buffer pool: fixed frames, page table, clock replacement and batched
//! write-back, with page faults served through fibers.

mod core;
mod store;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::io;

use thiserror::Error;

use crate::fiber::{FiberId, IoCtx, IoWait};
use crate::rt::{Buf, IoCompletion, IoKind, IoRequest, Region, RingHandle, RtError};

pub use self::core::{clock_sweep, FrameMeta, FrameState, PageId, PoolCore, Probe};
pub use self::store::{AlignedPage, FileHeader, PageIo, PageStore, MAGIC, VERSION};

pub const DEFAULT_EVICT_BATCH: usize = 8;

/// Bytes per registered region when the pool arena is registered.
const REGION_BYTES: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no evictable frame after two clock revolutions")]
    PoolExhausted,
    #[error("page {0} is not fixed")]
    NotFixed(PageId),
    #[error("{0} frames are still pinned")]
    PinnedRemain(usize),
    #[error("page {0} is outside the database")]
    InvalidPage(PageId),
    #[error("short transfer on page {pid}: {got} of {want} bytes")]
    ShortIo { pid: PageId, got: u32, want: usize },
    #[error("I/O on page {pid} failed: {source}")]
    IoFailed { pid: PageId, source: io::Error },
    #[error(transparent)]
    Ring(#[from] RtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub hits: u64,
    pub misses: u64,
    pub reads: u64,
    pub writes: u64,
    pub evictions: u64,
    pub eviction_rounds: u64,
    pub write_fixes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolConfig {
    pub frames: usize,
    pub evict_batch: usize,
}

impl PoolConfig {
    pub fn with_frames(frames: usize) -> PoolConfig {
        PoolConfig {
            frames,
            evict_batch: DEFAULT_EVICT_BATCH,
        }
    }
}

/// A pinned page. Release it with [`BufferPool::unfix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub frame: usize,
    pub pid: PageId,
    /// The page was read from storage for this fix.
    pub missed: bool,
    /// The fixing fiber was suspended at least once.
    pub suspended: bool,
}

struct Arena {
    ptr: *mut u8,
    layout: std::alloc::Layout,
}

impl Arena {
    fn new(bytes: usize, align: usize) -> Arena {
        let layout = std::alloc::Layout::from_size_align(bytes.max(align), align).expect("arena layout");
        // SAFETY: non-zero size.
        let ptr = unsafe { std::alloc::alloc_zeroed(layout) };
        assert!(!ptr.is_null(), "cannot allocate {bytes} byte buffer pool");
        Arena { ptr, layout }
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // SAFETY: allocated with this layout.
        unsafe { std::alloc::dealloc(self.ptr, self.layout) }
    }
}

pub struct BufferPool {
    core: RefCell<PoolCore>,
    arena: Arena,
    store: PageStore,
    page_size: usize,
    evict_batch: Cell<usize>,
    page_count: Cell<u64>,
    epoch: Cell<u64>,
    stats: Cell<PoolStats>,
    load_waiters: RefCell<HashMap<usize, Vec<FiberId>>>,
    frame_waiters: RefCell<Vec<FiberId>>,
    /// Frames per registered region once the arena is registered.
    registered: Cell<Option<usize>>,
    borrows: Vec<Cell<i32>>,
}

impl BufferPool {
    pub fn new(cfg: PoolConfig, store: PageStore, page_count: u64) -> BufferPool {
        let page_size = store.page_size();
        assert!(page_size.is_power_of_two() && page_size >= 512);
        BufferPool {
            core: RefCell::new(PoolCore::new(cfg.frames)),
            arena: Arena::new(cfg.frames * page_size, page_size.max(4096)),
            store,
            page_size,
            evict_batch: Cell::new(cfg.evict_batch.max(1)),
            page_count: Cell::new(page_count),
            epoch: Cell::new(0),
            stats: Cell::new(PoolStats::default()),
            load_waiters: RefCell::new(HashMap::new()),
            frame_waiters: RefCell::new(Vec::new()),
            registered: Cell::new(None),
            borrows: (0..cfg.frames).map(|_| Cell::new(0)).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.borrows.len()
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> u64 {
        self.page_count.get()
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn stats(&self) -> PoolStats {
        self.stats.get()
    }

    pub fn reset_stats(&self) {
        self.stats.set(PoolStats::default());
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.get()
    }

    /// Marks a structural change; suspended traversals will restart.
    pub fn bump_epoch(&self) {
        self.epoch.set(self.epoch.get() + 1);
    }

    pub fn set_evict_batch(&self, k: usize) {
        self.evict_batch.set(k.max(1));
    }

    pub fn evict_batch_size(&self) -> usize {
        self.evict_batch.get()
    }

    pub fn core_snapshot(&self) -> PoolCore {
        self.core.borrow().clone()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        self.core.borrow().check_invariants()
    }

    /// Frames currently holding a page.
    pub fn resident(&self) -> usize {
        self.core.borrow().table.len()
    }

    fn bump(&self, f: impl FnOnce(&mut PoolStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    fn frame_ptr(&self, f: usize) -> *mut u8 {
        // SAFETY: f < frames, so the offset is inside the arena.
        unsafe { self.arena.ptr.add(f * self.page_size) }
    }

    /// Registers the frame arena with `ring`; page I/O then uses fixed buffers.
    pub fn register_with(&self, ring: &mut RingHandle) -> Result<(), RtError> {
        let frames_per_region = (REGION_BYTES / self.page_size).max(1);
        let regions: Vec<Region> = (0..self.frames())
            .step_by(frames_per_region)
            .map(|f| Region {
                ptr: self.frame_ptr(f),
                len: (self.frames() - f).min(frames_per_region) * self.page_size,
            })
            .collect();
        // SAFETY: the arena lives as long as the pool, which must outlive the ring's use.
        unsafe { ring.register_buffers(&regions)? };
        self.registered.set(Some(frames_per_region));
        Ok(())
    }

    fn page_request(&self, write: bool, f: usize, pid: PageId) -> IoRequest {
        let ptr = self.frame_ptr(f);
        let len = self.page_size;
        let buf = match self.registered.get() {
            Some(per) => Buf::Fixed {
                index: (f / per) as u32,
                ptr,
                len,
            },
            None => Buf::Raw { ptr, len },
        };
        let kind = match (self.store.io, write) {
            (PageIo::Standard, false) => IoKind::Read,
            (PageIo::Standard, true) => IoKind::Write,
            (PageIo::Passthrough, false) => IoKind::NvmeRead,
            (PageIo::Passthrough, true) => IoKind::NvmeWrite,
        };
        IoRequest {
            offset: self.store.offset(pid),
            buf,
            ..IoRequest::new(kind, self.store.target())
        }
        .tag(pid)
    }

    fn check_transfer(&self, pid: PageId, c: IoCompletion) -> Result<(), PoolError> {
        match c.into_result() {
            Ok(n) if n as usize == self.page_size => Ok(()),
            Ok(n) => Err(PoolError::ShortIo {
                pid,
                got: n,
                want: self.page_size,
            }),
            Err(source) => Err(PoolError::IoFailed { pid, source }),
        }
    }

    fn wake_all(&self, ctx: &IoCtx, ids: Vec<FiberId>) {
        for id in ids {
            ctx.wake(id);
        }
    }

    fn wake_frame_waiters(&self, ctx: &IoCtx) {
        let ids = std::mem::take(&mut *self.frame_waiters.borrow_mut());
        self.wake_all(ctx, ids);
    }

    fn wake_load_waiters(&self, ctx: &IoCtx, f: usize) {
        let ids = self.load_waiters.borrow_mut().remove(&f).unwrap_or_default();
        self.wake_all(ctx, ids);
    }

    /// Pins `pid`, reading it from storage on a miss.
    pub async fn fix(&self, ctx: &IoCtx, pid: PageId, intent: Intent) -> Result<FrameRef, PoolError> {
        if pid >= self.page_count.get() {
            return Err(PoolError::InvalidPage(pid));
        }
        if intent == Intent::Write {
            self.bump(|s| s.write_fixes += 1);
        }
        let mut suspended = false;
        loop {
            let probe = self.core.borrow_mut().probe(pid);
            match probe {
                Probe::Hit(frame) => {
                    self.bump(|s| s.hits += 1);
                    return Ok(FrameRef {
                        frame,
                        pid,
                        missed: false,
                        suspended,
                    });
                }
                Probe::Busy(f) => {
                    self.load_waiters
                        .borrow_mut()
                        .entry(f)
                        .or_default()
                        .push(ctx.current());
                    ctx.park().await;
                    suspended = true;
                }
                Probe::Miss => {
                    let taken = self.core.borrow_mut().take_free();
                    let Some(f) = taken else {
                        suspended |= self.make_room(ctx).await?;
                        continue;
                    };
                    self.core.borrow_mut().begin_load(pid, f);
                    self.bump(|s| {
                        s.misses += 1;
                        s.reads += 1;
                    });
                    let req = self.page_request(false, f, pid);
                    // SAFETY: the frame is Loading, so nothing else touches it
                    // until the read completes.
                    let res = match unsafe { ctx.submit(req) } {
                        Ok(wait) => {
                            let c = wait.await;
                            self.check_transfer(pid, c)
                        }
                        Err(e) => Err(e.into()),
                    };
                    self.core.borrow_mut().finish_load(f, res.is_ok());
                    self.wake_load_waiters(ctx, f);
                    self.wake_frame_waiters(ctx);
                    res?;
                    return Ok(FrameRef {
                        frame: f,
                        pid,
                        missed: true,
                        suspended: true,
                    });
                }
            }
        }
    }

    /// Appends a new zeroed page to the database and pins it.
    pub async fn fix_new(&self, ctx: &IoCtx) -> Result<FrameRef, PoolError> {
        let pid = self.page_count.get();
        self.page_count.set(pid + 1);
        let mut suspended = false;
        let f = loop {
            let taken = self.core.borrow_mut().take_free();
            match taken {
                Some(f) => break f,
                None => suspended |= self.make_room(ctx).await?,
            }
        };
        self.core.borrow_mut().install_new(pid, f);
        // SAFETY: the frame was free; nobody else references it.
        unsafe { std::ptr::write_bytes(self.frame_ptr(f), 0, self.page_size) };
        Ok(FrameRef {
            frame: f,
            pid,
            missed: false,
            suspended,
        })
    }

    /// Gets at least one frame onto the free list, or waits for a running
    /// eviction to do so. Returns whether the fiber was suspended.
    async fn make_room(&self, ctx: &IoCtx) -> Result<bool, PoolError> {
        let evicting = self.core.borrow().evicting();
        if evicting > self.frame_waiters.borrow().len() {
            self.frame_waiters.borrow_mut().push(ctx.current());
            ctx.park().await;
            return Ok(true);
        }
        let before = self.stats.get().writes;
        let n = self.evict_batch(ctx, self.evict_batch.get()).await?;
        if n > 0 {
            return Ok(self.stats.get().writes != before);
        }
        if self.core.borrow().evicting() > 0 || self.core.borrow().frames.iter().any(|m| m.state == FrameState::Loading) {
            self.frame_waiters.borrow_mut().push(ctx.current());
            ctx.park().await;
            return Ok(true);
        }
        Err(PoolError::PoolExhausted)
    }

    /// Evicts up to `k` frames chosen by the clock, writing dirty victims
    /// back as one batch. Returns the number of victims.
    pub async fn evict_batch(&self, ctx: &IoCtx, k: usize) -> Result<usize, PoolError> {
        let victims = self.core.borrow_mut().select_victims(k);
        if victims.is_empty() {
            return Ok(0);
        }
        self.bump_epoch();
        let dirty: Vec<usize> = {
            let core = self.core.borrow();
            victims.iter().copied().filter(|&f| core.frames[f].dirty).collect()
        };
        let mut waits: Vec<(usize, IoWait)> = Vec::with_capacity(dirty.len());
        let mut failed: Vec<usize> = Vec::new();
        let mut first_err: Option<PoolError> = None;
        for &f in &dirty {
            let pid = self.core.borrow().frames[f].page.expect("victim page");
            // SAFETY: an evicting frame cannot be fixed, so its bytes are stable.
            match unsafe { ctx.submit(self.page_request(true, f, pid)) } {
                Ok(w) => waits.push((f, w)),
                Err(e) => {
                    failed.push(f);
                    first_err.get_or_insert(e.into());
                }
            }
        }
        self.bump(|s| {
            s.writes += waits.len() as u64;
            s.evictions += victims.len() as u64;
            s.eviction_rounds += 1;
        });
        for (f, w) in waits {
            let pid = self.core.borrow().frames[f].page.expect("victim page");
            let c = w.await;
            if let Err(e) = self.check_transfer(pid, c) {
                failed.push(f);
                first_err.get_or_insert(e);
            }
        }
        let mut core = self.core.borrow_mut();
        let freed: Vec<usize> = victims.iter().copied().filter(|f| !failed.contains(f)).collect();
        for &f in &failed {
            core.abort_evict(f);
        }
        core.finish_evict(&freed);
        drop(core);
        for &f in &victims {
            self.wake_load_waiters(ctx, f);
        }
        self.wake_frame_waiters(ctx);
        match first_err {
            Some(e) => Err(e),
            None => Ok(freed.len()),
        }
    }

    pub fn unfix(&self, pid: PageId, dirty: bool) -> Result<(), PoolError> {
        self.core.borrow_mut().unfix(pid, dirty)
    }

    /// Writes every dirty page back. No frame may be pinned.
    pub async fn flush_all(&self, ctx: &IoCtx) -> Result<usize, PoolError> {
        let pinned = self.core.borrow().pinned();
        if pinned > 0 {
            return Err(PoolError::PinnedRemain(pinned));
        }
        let mut dirty: Vec<(PageId, usize)> = {
            let core = self.core.borrow();
            core.frames
                .iter()
                .enumerate()
                .filter(|(_, m)| m.dirty && m.state == FrameState::Resident)
                .map(|(f, m)| (m.page.expect("dirty page"), f))
                .collect()
        };
        dirty.sort();
        let batch = self.evict_batch.get().max(32);
        let mut written = 0;
        for chunk in dirty.chunks(batch) {
            let mut waits = Vec::with_capacity(chunk.len());
            for &(pid, f) in chunk {
                self.core.borrow_mut().frames[f].pin += 1;
                // SAFETY: the frame is pinned and no fiber holds it fixed.
                match unsafe { ctx.submit(self.page_request(true, f, pid)) } {
                    Ok(w) => waits.push((pid, f, w)),
                    Err(e) => {
                        self.core.borrow_mut().frames[f].pin -= 1;
                        for (_, f, w) in waits {
                            w.await;
                            self.core.borrow_mut().frames[f].pin -= 1;
                        }
                        return Err(e.into());
                    }
                }
            }
            self.bump(|s| s.writes += waits.len() as u64);
            let mut err = None;
            for (pid, f, w) in waits {
                let c = w.await;
                let mut core = self.core.borrow_mut();
                core.frames[f].pin -= 1;
                match self.check_transfer(pid, c) {
                    Ok(()) => {
                        core.frames[f].dirty = false;
                        written += 1;
                    }
                    Err(e) => {
                        err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(written)
    }

    /// Runs `f` on the bytes of a fixed page.
    pub fn with_page<R>(&self, r: &FrameRef, f: impl FnOnce(&[u8]) -> R) -> R {
        let b = &self.borrows[r.frame];
        assert!(b.get() >= 0, "page {} is mutably borrowed", r.pid);
        b.set(b.get() + 1);
        // SAFETY: the frame is pinned and no mutable borrow is live.
        let out = f(unsafe { std::slice::from_raw_parts(self.frame_ptr(r.frame), self.page_size) });
        b.set(b.get() - 1);
        out
    }

    /// Runs `f` on the mutable bytes of a fixed page.
    pub fn with_page_mut<R>(&self, r: &FrameRef, f: impl FnOnce(&mut [u8]) -> R) -> R {
        let b = &self.borrows[r.frame];
        assert_eq!(b.get(), 0, "page {} is already borrowed", r.pid);
        b.set(-1);
        // SAFETY: the frame is pinned and this is the only live borrow.
        let out = f(unsafe { std::slice::from_raw_parts_mut(self.frame_ptr(r.frame), self.page_size) });
        b.set(0);
        out
    }

    /// Runs `f` on two distinct fixed pages, the first mutable.
    pub fn with_pages_mut<R>(
        &self,
        a: &FrameRef,
        b: &FrameRef,
        f: impl FnOnce(&mut [u8], &mut [u8]) -> R,
    ) -> R {
        assert_ne!(a.frame, b.frame);
        let (ba, bb) = (&self.borrows[a.frame], &self.borrows[b.frame]);
        assert!(ba.get() == 0 && bb.get() == 0, "page already borrowed");
        ba.set(-1);
        bb.set(-1);
        // SAFETY: distinct pinned frames with no other live borrows.
        let out = unsafe {
            f(
                std::slice::from_raw_parts_mut(self.frame_ptr(a.frame), self.page_size),
                std::slice::from_raw_parts_mut(self.frame_ptr(b.frame), self.page_size),
            )
        };
        ba.set(0);
        bb.set(0);
        out
    }
}

#[cfg(test)]
mod tests;
