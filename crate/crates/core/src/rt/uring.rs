//! Kernel ring backend built on the `io-uring` crate.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU16, Ordering};
use std::time::{Duration, Instant};

use io_uring::{cqueue, opcode, squeue, types, IoUring};

use super::config::{Backend, RingConfig};
use super::driver::Driver;
use super::error::{Result, RtError};
use super::request::{Buf, FileDesc, IoCompletion, IoKind, IoRequest, Target};
use super::Region;

const IORING_RECVSEND_POLL_FIRST: u16 = 1 << 0;
const IORING_RECV_MULTISHOT: u16 = 1 << 1;
const IORING_ENTER_GETEVENTS: u32 = 1 << 0;

/// user_data bit marking ring-internal link-timeout entries.
const INTERNAL: u64 = 1 << 63;

pub const MAX_REGISTERED_BUFFERS: usize = 1 << 14;
pub const MAX_REGISTERED_FILES: usize = 1 << 15;

const NVME_URING_CMD_IO: u32 = 0xC048_4E80;
const NVME_IOCTL_ID: libc::c_ulong = 0x4E40;
const NVME_CMD_FLUSH: u8 = 0x00;
const NVME_CMD_WRITE: u8 = 0x01;
const NVME_CMD_READ: u8 = 0x02;

/// `struct nvme_uring_cmd` from `<linux/nvme_ioctl.h>`.
#[repr(C)]
#[derive(Default, Clone, Copy)]
struct NvmeUringCmd {
    opcode: u8,
    flags: u8,
    rsvd1: u16,
    nsid: u32,
    cdw2: u32,
    cdw3: u32,
    metadata: u64,
    addr: u64,
    metadata_len: u32,
    data_len: u32,
    cdw10: u32,
    cdw11: u32,
    cdw12: u32,
    cdw13: u32,
    cdw14: u32,
    cdw15: u32,
    timeout_ms: u32,
    rsvd2: u32,
}

const _: () = assert!(std::mem::size_of::<NvmeUringCmd>() == 72);

/// Entry sizes of a ring: 64-byte entries, or 128/32-byte entries for passthrough.
pub(crate) trait Flavor: Send + 'static {
    const WIDE: bool;
    type Sqe: squeue::EntryMarker + Send;
    type Cqe: cqueue::EntryMarker + Send;
    fn uring_cmd(cmd: opcode::UringCmd80, flags: squeue::Flags, user_data: u64) -> Option<Self::Sqe>;
}

pub(crate) struct Standard;
pub(crate) struct Wide;

impl Flavor for Standard {
    const WIDE: bool = false;
    type Sqe = squeue::Entry;
    type Cqe = cqueue::Entry;
    fn uring_cmd(_: opcode::UringCmd80, _: squeue::Flags, _: u64) -> Option<squeue::Entry> {
        None
    }
}

impl Flavor for Wide {
    const WIDE: bool = true;
    type Sqe = squeue::Entry128;
    type Cqe = cqueue::Entry32;
    fn uring_cmd(
        cmd: opcode::UringCmd80,
        flags: squeue::Flags,
        user_data: u64,
    ) -> Option<squeue::Entry128> {
        Some(cmd.build().flags(flags).user_data(user_data))
    }
}

struct Slot {
    tag: u64,
    zero_copy: bool,
    multishot: bool,
    zc_result: Option<i32>,
    _timeout: Option<Box<types::Timespec>>,
}

struct ProvidedRing {
    ring: *mut types::BufRingEntry,
    ring_bytes: usize,
    bufs: Vec<u8>,
    buf_len: u32,
    mask: u16,
    tail: u16,
}

// SAFETY: the mapping is owned by this struct and only touched by the owning ring.
unsafe impl Send for ProvidedRing {}

impl ProvidedRing {
    fn push(&mut self, bid: u16) {
        let addr = self.bufs.as_ptr() as u64 + bid as u64 * self.buf_len as u64;
        // SAFETY: index is masked into the mapped ring.
        unsafe {
            let entry = &mut *self.ring.add((self.tail & self.mask) as usize);
            entry.set_addr(addr);
            entry.set_len(self.buf_len);
            entry.set_bid(bid);
        }
        self.tail = self.tail.wrapping_add(1);
    }

    fn publish(&self) {
        // SAFETY: the tail field lives in the first entry of the mapped ring.
        unsafe {
            let tail = types::BufRingEntry::tail(self.ring) as *const AtomicU16;
            (*tail).store(self.tail, Ordering::Release);
        }
    }
}

impl Drop for ProvidedRing {
    fn drop(&mut self) {
        // SAFETY: mapped in `setup_buf_ring` with this length.
        unsafe { libc::munmap(self.ring.cast(), self.ring_bytes) };
    }
}

pub(crate) struct UringDriver<F: Flavor> {
    ring: IoUring<F::Sqe, F::Cqe>,
    backend: Backend,
    iopoll: bool,
    defer_taskrun: bool,
    force_async: bool,
    slots: Vec<Option<Slot>>,
    free: Vec<usize>,
    staged_user: usize,
    ready: VecDeque<IoCompletion>,
    nsids: HashMap<i32, u32>,
    has_buffers: bool,
    has_files: bool,
    buf_rings: HashMap<u16, ProvidedRing>,
    _flavor: PhantomData<F>,
}

fn setup_error(e: io::Error) -> RtError {
    RtError::UnsupportedBackend(format!("ring setup failed: {e}"))
}

impl<F: Flavor> UringDriver<F> {
    pub(crate) fn new(cfg: &RingConfig) -> Result<Self> {
        let mut b = IoUring::<F::Sqe, F::Cqe>::builder();
        b.setup_cqsize(cfg.cq_entries());
        if cfg.defer_taskrun {
            b.setup_defer_taskrun();
        }
        if cfg.single_issuer {
            b.setup_single_issuer();
        }
        if cfg.coop_taskrun {
            b.setup_coop_taskrun();
        }
        if cfg.backend == Backend::UringSqpoll {
            b.setup_sqpoll(cfg.sqpoll_idle_ms);
        }
        if cfg.iopoll || cfg.backend == Backend::UringIopoll {
            b.setup_iopoll();
        }
        let ring = b.build(cfg.sq_depth).map_err(setup_error)?;
        if cfg.napi_busy_poll_us > 0 {
            let mut napi = types::Napi::new()
                .set_busy_poll_timeout(cfg.napi_busy_poll_us)
                .set_prefer_busy_poll(true);
            ring.submitter()
                .register_napi(&mut napi)
                .map_err(|e| RtError::UnsupportedBackend(format!("NAPI busy polling: {e}")))?;
        }
        Ok(UringDriver {
            ring,
            backend: cfg.backend,
            iopoll: cfg.iopoll || cfg.backend == Backend::UringIopoll,
            defer_taskrun: cfg.defer_taskrun,
            force_async: cfg.force_async_workers,
            slots: Vec::new(),
            free: Vec::new(),
            staged_user: 0,
            ready: VecDeque::new(),
            nsids: HashMap::new(),
            has_buffers: false,
            has_files: false,
            buf_rings: HashMap::new(),
            _flavor: PhantomData,
        })
    }

    fn alloc_slot(&mut self, slot: Slot) -> usize {
        match self.free.pop() {
            Some(i) => {
                self.slots[i] = Some(slot);
                i
            }
            None => {
                self.slots.push(Some(slot));
                self.slots.len() - 1
            }
        }
    }

    fn release_slot(&mut self, i: usize) {
        self.slots[i] = None;
        self.free.push(i);
    }

    fn nsid(&mut self, fd: i32) -> Result<u32> {
        if let Some(&n) = self.nsids.get(&fd) {
            return Ok(n);
        }
        // SAFETY: NVME_IOCTL_ID takes no argument and returns the namespace id.
        let rc = unsafe { libc::ioctl(fd, NVME_IOCTL_ID as _) };
        if rc < 0 {
            return Err(RtError::BackendFailure(io::Error::last_os_error()));
        }
        self.nsids.insert(fd, rc as u32);
        Ok(rc as u32)
    }

    fn nvme_entry(
        &mut self,
        req: &IoRequest,
        desc: FileDesc,
        flags: squeue::Flags,
        user_data: u64,
    ) -> Result<F::Sqe> {
        let lba = desc.direct_block.unwrap_or(512) as u64;
        let mut cmd = NvmeUringCmd {
            nsid: self.nsid(desc.fd)?,
            ..NvmeUringCmd::default()
        };
        match req.kind {
            IoKind::NvmeRead | IoKind::NvmeWrite => {
                let slba = req.offset / lba;
                let nlb = (req.buf.len() as u64 / lba).max(1) - 1;
                cmd.opcode = if req.kind == IoKind::NvmeRead {
                    NVME_CMD_READ
                } else {
                    NVME_CMD_WRITE
                };
                cmd.addr = req.buf.ptr() as u64;
                cmd.data_len = req.buf.len() as u32;
                cmd.cdw10 = slba as u32;
                cmd.cdw11 = (slba >> 32) as u32;
                cmd.cdw12 = nlb as u32;
            }
            _ => cmd.opcode = NVME_CMD_FLUSH,
        }
        let mut bytes = [0u8; 80];
        // SAFETY: NvmeUringCmd is plain-old-data of 72 bytes.
        let raw: [u8; 72] = unsafe { std::mem::transmute(cmd) };
        bytes[..72].copy_from_slice(&raw);
        let mut op = opcode::UringCmd80::new(types::Fd(desc.fd), NVME_URING_CMD_IO).cmd(bytes);
        if let Target::Fixed(i) = req.target {
            op = opcode::UringCmd80::new(types::Fixed(i), NVME_URING_CMD_IO).cmd(bytes);
        }
        F::uring_cmd(op, flags, user_data).ok_or(RtError::KindUnsupportedByBackend {
            kind: req.kind.name(),
            backend: self.backend.name(),
        })
    }

    fn build_entry(req: &IoRequest) -> squeue::Entry {
        macro_rules! with_fd {
            ($t:expr, |$fd:ident| $body:expr) => {
                match $t {
                    Target::Fd(d) => {
                        let $fd = types::Fd(d.fd);
                        $body
                    }
                    Target::Fixed(i) => {
                        let $fd = types::Fixed(i);
                        $body
                    }
                }
            };
        }
        let len = req.buf.len() as u32;
        let ptr = req.buf.ptr();
        let poll_first = if req.flags.poll_first {
            IORING_RECVSEND_POLL_FIRST
        } else {
            0
        };
        match req.kind {
            IoKind::Nop => opcode::Nop::new().build(),
            IoKind::Read => with_fd!(req.target, |fd| match req.buf {
                Buf::Fixed { index, .. } => opcode::ReadFixed::new(fd, ptr, len, index as u16)
                    .offset(req.offset)
                    .build(),
                _ => opcode::Read::new(fd, ptr, len).offset(req.offset).build(),
            }),
            IoKind::Write => with_fd!(req.target, |fd| match req.buf {
                Buf::Fixed { index, .. } => opcode::WriteFixed::new(fd, ptr, len, index as u16)
                    .offset(req.offset)
                    .build(),
                _ => opcode::Write::new(fd, ptr, len).offset(req.offset).build(),
            }),
            IoKind::Fsync { datasync } => with_fd!(req.target, |fd| {
                let flags = if datasync {
                    types::FsyncFlags::DATASYNC
                } else {
                    types::FsyncFlags::empty()
                };
                opcode::Fsync::new(fd).flags(flags).build()
            }),
            IoKind::Send => with_fd!(req.target, |fd| {
                if req.flags.zero_copy {
                    let index = match req.buf {
                        Buf::Fixed { index, .. } => Some(index as u16),
                        _ => None,
                    };
                    opcode::SendZc::new(fd, ptr, len)
                        .buf_index(index)
                        .flags(libc::MSG_NOSIGNAL)
                        .zc_flags(poll_first)
                        .build()
                } else {
                    opcode::Send::new(fd, ptr, len)
                        .flags(libc::MSG_NOSIGNAL)
                        .ioprio(poll_first)
                        .build()
                }
            }),
            IoKind::Recv => with_fd!(req.target, |fd| match req.buf {
                Buf::Group { group, len } => {
                    let mut ioprio = poll_first;
                    if req.flags.multishot {
                        ioprio |= IORING_RECV_MULTISHOT;
                    }
                    opcode::Recv::new(fd, std::ptr::null_mut(), len)
                        .buf_group(group)
                        .ioprio(ioprio)
                        .build()
                        .flags(squeue::Flags::BUFFER_SELECT)
                }
                _ => opcode::Recv::new(fd, ptr, len).ioprio(poll_first).build(),
            }),
            IoKind::NvmeRead | IoKind::NvmeWrite | IoKind::NvmeFlush => {
                unreachable!("built by nvme_entry")
            }
        }
    }

    fn drain_cq(&mut self) {
        let cqes: Vec<cqueue::Entry> = self.ring.completion().map(Into::into).collect();
        for cqe in cqes {
            let ud = cqe.user_data();
            if ud & INTERNAL != 0 {
                continue;
            }
            let idx = ud as usize;
            let flags = cqe.flags();
            let res = cqe.result();
            let Some(slot) = self.slots[idx].as_mut() else {
                continue;
            };
            let tag = slot.tag;
            if slot.zero_copy {
                if cqueue::notif(flags) {
                    let res = slot.zc_result.take().unwrap_or(0);
                    self.ready.push_back(IoCompletion::from_result(tag, res));
                    self.release_slot(idx);
                } else if cqueue::more(flags) {
                    // Result first; the buffer is released by a later notification.
                    slot.zc_result = Some(res);
                } else {
                    self.ready.push_back(IoCompletion::from_result(tag, res));
                    self.release_slot(idx);
                }
                continue;
            }
            let more = slot.multishot && cqueue::more(flags);
            let mut c = IoCompletion::from_result(tag, res);
            c.more_coming = more;
            c.buffer_id = cqueue::buffer_select(flags);
            self.ready.push_back(c);
            if !more {
                self.release_slot(idx);
            }
        }
    }

    fn wait(&mut self, timeout: Option<Duration>) -> Result<bool> {
        let res = match timeout {
            Some(t) => {
                let ts = types::Timespec::new()
                    .sec(t.as_secs())
                    .nsec(t.subsec_nanos());
                let args = types::SubmitArgs::new().timespec(&ts);
                self.ring.submitter().submit_with_args(1, &args)
            }
            None => self.ring.submitter().submit_and_wait(1),
        };
        match res {
            Ok(_) => Ok(true),
            Err(e) if e.raw_os_error() == Some(libc::ETIME) => Ok(false),
            Err(e) if e.raw_os_error() == Some(libc::EINTR) => Ok(true),
            Err(e) if e.raw_os_error() == Some(libc::EBUSY) => Ok(true),
            Err(e) => Err(RtError::BackendFailure(e)),
        }
    }
}

impl<F: Flavor> Driver for UringDriver<F> {
    fn name(&self) -> &'static str {
        self.backend.name()
    }

    fn supports(&self, req: &IoRequest) -> bool {
        if req.kind == IoKind::Recv && req.flags.zero_copy {
            // Needs an interface queue registered for zero-copy receive.
            return false;
        }
        if req.kind.is_nvme() && !F::WIDE {
            return false;
        }
        if self.iopoll {
            return !req.kind.is_socket() && !matches!(req.kind, IoKind::Fsync { .. });
        }
        true
    }

    fn stage(&mut self, req: &IoRequest, desc: FileDesc) -> Result<()> {
        let needed = if req.flags.link_timeout_us.is_some() { 2 } else { 1 };
        {
            let sq = self.ring.submission();
            if sq.capacity() - sq.len() < needed {
                return Err(RtError::SqFull);
            }
        }
        let timeout = req.flags.link_timeout_us.map(|us| {
            Box::new(
                types::Timespec::new()
                    .sec(us / 1_000_000)
                    .nsec(((us % 1_000_000) * 1000) as u32),
            )
        });
        let ts_ptr = timeout.as_deref().map(|t| t as *const types::Timespec);
        let mut sqe_flags = squeue::Flags::empty();
        if req.flags.link_next || timeout.is_some() {
            sqe_flags |= squeue::Flags::IO_LINK;
        }
        if self.force_async {
            sqe_flags |= squeue::Flags::ASYNC;
        }
        let idx = self.alloc_slot(Slot {
            tag: req.tag,
            zero_copy: req.kind == IoKind::Send && req.flags.zero_copy,
            multishot: req.flags.multishot,
            zc_result: None,
            _timeout: timeout,
        });
        let entry: F::Sqe = if req.kind.is_nvme() {
            match self.nvme_entry(req, desc, sqe_flags, idx as u64) {
                Ok(e) => e,
                Err(e) => {
                    self.release_slot(idx);
                    return Err(e);
                }
            }
        } else {
            Self::build_entry(req)
                .flags(sqe_flags)
                .user_data(idx as u64)
                .into()
        };
        let mut sq = self.ring.submission();
        // SAFETY: buffers and the timespec outlive the request per the enqueue
        // contract and the slot that owns the timespec.
        unsafe {
            sq.push(&entry).map_err(|_| RtError::SqFull)?;
            if let Some(ts) = ts_ptr {
                let mut lt = opcode::LinkTimeout::new(ts).build().user_data(INTERNAL | idx as u64);
                if req.flags.link_next {
                    lt = lt.flags(squeue::Flags::IO_LINK);
                }
                sq.push(&lt.into()).map_err(|_| RtError::SqFull)?;
            }
        }
        drop(sq);
        self.staged_user += 1;
        Ok(())
    }

    fn staged(&self) -> usize {
        self.staged_user
    }

    fn submit(&mut self) -> Result<usize> {
        if self.staged_user == 0 {
            return Ok(0);
        }
        loop {
            match self.ring.submit() {
                Ok(_) => break,
                Err(e) if e.raw_os_error() == Some(libc::EINTR) => continue,
                Err(e) if e.raw_os_error() == Some(libc::EBUSY) => {
                    // CQ is backed up; the caller reaps and submits again.
                    if self.ring.submission().is_empty() {
                        break;
                    }
                    self.drain_cq();
                    let _ = unsafe {
                        self.ring.submitter().enter::<libc::sigset_t>(
                            0,
                            0,
                            IORING_ENTER_GETEVENTS,
                            None,
                        )
                    };
                    continue;
                }
                Err(e) => return Err(RtError::BackendFailure(e)),
            }
        }
        let n = self.staged_user;
        self.staged_user = 0;
        Ok(n)
    }

    fn reap(
        &mut self,
        out: &mut Vec<IoCompletion>,
        min: usize,
        max: usize,
        timeout: Option<Duration>,
    ) -> Result<()> {
        let deadline = timeout.map(|t| Instant::now() + t);
        self.drain_cq();
        if self.ready.len() < min.max(1) && self.defer_taskrun && !self.slots_empty() {
            // Deferred task work only runs inside an enter with GETEVENTS.
            // SAFETY: no arguments are passed.
            unsafe {
                self.ring
                    .submitter()
                    .enter::<libc::sigset_t>(0, 0, IORING_ENTER_GETEVENTS, None)
                    .map_err(RtError::BackendFailure)?;
            }
            self.drain_cq();
        }
        while self.ready.len() < min {
            let remaining = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(RtError::TimedOut {
                            wanted: min,
                            got: self.ready.len(),
                        });
                    }
                    Some(d - now)
                }
                None => None,
            };
            let progressed = self.wait(remaining)?;
            self.drain_cq();
            if !progressed && self.ready.len() < min {
                return Err(RtError::TimedOut {
                    wanted: min,
                    got: self.ready.len(),
                });
            }
        }
        let take = self.ready.len().min(max);
        out.extend(self.ready.drain(..take));
        Ok(())
    }

    fn register_buffers(&mut self, regions: &[Region]) -> Result<()> {
        if regions.len() > MAX_REGISTERED_BUFFERS {
            return Err(RtError::TooManyRegions(regions.len()));
        }
        let sub = self.ring.submitter();
        if self.has_buffers {
            sub.unregister_buffers()?;
            self.has_buffers = false;
        }
        if regions.is_empty() {
            return Ok(());
        }
        let iov: Vec<libc::iovec> = regions
            .iter()
            .map(|r| libc::iovec {
                iov_base: r.ptr.cast(),
                iov_len: r.len,
            })
            .collect();
        // SAFETY: regions stay valid while registered per register_buffers' contract.
        unsafe { sub.register_buffers(&iov)? };
        self.has_buffers = true;
        Ok(())
    }

    fn register_files(&mut self, files: &[FileDesc]) -> Result<()> {
        if files.len() > MAX_REGISTERED_FILES {
            return Err(RtError::TooManyFiles(files.len()));
        }
        let sub = self.ring.submitter();
        if self.has_files {
            sub.unregister_files()?;
            self.has_files = false;
        }
        if files.is_empty() {
            return Ok(());
        }
        let fds: Vec<i32> = files.iter().map(|f| f.fd).collect();
        sub.register_files(&fds)?;
        self.has_files = true;
        Ok(())
    }

    fn setup_buf_ring(&mut self, group: u16, entries: u16, buf_len: u32) -> Result<()> {
        if !entries.is_power_of_two() || entries > 32768 {
            return Err(RtError::InvalidDepth(entries as u32));
        }
        let ring_bytes = entries as usize * std::mem::size_of::<types::BufRingEntry>();
        // SAFETY: anonymous private mapping, checked below.
        let ring = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                ring_bytes,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ring == libc::MAP_FAILED {
            return Err(RtError::BackendFailure(io::Error::last_os_error()));
        }
        let mut pr = ProvidedRing {
            ring: ring.cast(),
            ring_bytes,
            bufs: vec![0u8; entries as usize * buf_len as usize],
            buf_len,
            mask: entries - 1,
            tail: 0,
        };
        // SAFETY: the mapping lives in `pr`, which is kept until the ring drops.
        unsafe {
            self.ring
                .submitter()
                .register_buf_ring_with_flags(ring as u64, entries, group, 0)?;
        }
        for bid in 0..entries {
            pr.push(bid);
        }
        pr.publish();
        self.buf_rings.insert(group, pr);
        Ok(())
    }

    fn provided_buffer(&mut self, group: u16, bid: u16) -> Option<*const u8> {
        let pr = self.buf_rings.get(&group)?;
        (bid <= pr.mask).then(|| unsafe { pr.bufs.as_ptr().add(bid as usize * pr.buf_len as usize) })
    }

    fn recycle_buffer(&mut self, group: u16, bid: u16) {
        if let Some(pr) = self.buf_rings.get_mut(&group) {
            pr.push(bid);
            pr.publish();
        }
    }
}

impl<F: Flavor> UringDriver<F> {
    fn slots_empty(&self) -> bool {
        self.free.len() == self.slots.len()
    }
}

/// Probes whether the kernel accepts a ring with `cfg`'s flags, bypassing
/// the handle's own validation.
pub fn kernel_accepts(cfg: &RingConfig) -> io::Result<()> {
    let mut b = IoUring::<squeue::Entry, cqueue::Entry>::builder();
    if cfg.defer_taskrun {
        b.setup_defer_taskrun();
    }
    if cfg.single_issuer {
        b.setup_single_issuer();
    }
    if cfg.coop_taskrun {
        b.setup_coop_taskrun();
    }
    if cfg.backend == Backend::UringSqpoll {
        b.setup_sqpoll(cfg.sqpoll_idle_ms);
    }
    if cfg.iopoll || cfg.backend == Backend::UringIopoll {
        b.setup_iopoll();
    }
    b.build(cfg.sq_depth.next_power_of_two()).map(drop)
}
