use std::fs::{File, OpenOptions};
use std::io;
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::fs::OpenOptionsExt;
use std::path::Path;

/// Largest storage request handed to a ring; bigger transfers are split by
/// the caller so they stay on the asynchronous path.
pub const MAX_STORAGE_REQUEST: usize = 512 * 1024;

pub const DEFAULT_LOGICAL_BLOCK: u32 = 4096;

/// A file or socket as seen by the runtime.
///
/// `direct_block` is `Some(logical block size)` when the handle was opened
/// for direct I/O; requests against it must be block aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileDesc {
    pub fd: RawFd,
    pub direct_block: Option<u32>,
}

impl FileDesc {
    pub fn buffered(fd: RawFd) -> Self {
        FileDesc {
            fd,
            direct_block: None,
        }
    }

    pub fn socket(sock: &impl AsRawFd) -> Self {
        FileDesc::buffered(sock.as_raw_fd())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Fd(FileDesc),
    /// Index into the ring's registered file table.
    Fixed(u32),
}

impl From<FileDesc> for Target {
    fn from(d: FileDesc) -> Self {
        Target::Fd(d)
    }
}

/// An open storage file together with its direct-I/O alignment.
#[derive(Debug)]
pub struct StorageFile {
    file: File,
    direct_block: Option<u32>,
}

impl StorageFile {
    pub fn open(path: &Path, direct: bool, create: bool) -> io::Result<StorageFile> {
        let mut opts = OpenOptions::new();
        opts.read(true).write(true).create(create);
        if direct {
            opts.custom_flags(libc::O_DIRECT);
        }
        let file = opts.open(path)?;
        let direct_block = direct.then(|| logical_block_size(&file));
        Ok(StorageFile { file, direct_block })
    }

    /// Opens with `O_SYNC` so every write is durable on return.
    pub fn open_osync(path: &Path, direct: bool) -> io::Result<StorageFile> {
        let mut flags = libc::O_SYNC;
        if direct {
            flags |= libc::O_DIRECT;
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .custom_flags(flags)
            .open(path)?;
        let direct_block = direct.then(|| logical_block_size(&file));
        Ok(StorageFile { file, direct_block })
    }

    pub fn from_file(file: File, direct_block: Option<u32>) -> StorageFile {
        StorageFile { file, direct_block }
    }

    pub fn desc(&self) -> FileDesc {
        FileDesc {
            fd: self.file.as_raw_fd(),
            direct_block: self.direct_block,
        }
    }

    pub fn target(&self) -> Target {
        Target::Fd(self.desc())
    }

    pub fn file(&self) -> &File {
        &self.file
    }

    pub fn is_direct(&self) -> bool {
        self.direct_block.is_some()
    }
}

/// Logical block size of the device backing `file`, 4096 when unknown.
pub fn logical_block_size(file: &File) -> u32 {
    const BLKSSZGET: libc::c_ulong = 0x1268;
    let mut size: libc::c_int = 0;
    // SAFETY: BLKSSZGET writes one int; it fails harmlessly on regular files.
    let rc = unsafe { libc::ioctl(file.as_raw_fd(), BLKSSZGET as _, &mut size) };
    if rc == 0 && size > 0 {
        size as u32
    } else {
        DEFAULT_LOGICAL_BLOCK
    }
}

/// Memory a request reads from or writes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Buf {
    None,
    Raw { ptr: *mut u8, len: usize },
    /// A slice of registered buffer `index`; `ptr` lies inside that region.
    Fixed { index: u32, ptr: *mut u8, len: usize },
    /// Let the kernel pick a buffer from provided-buffer group `group`.
    Group { group: u16, len: u32 },
}

impl Buf {
    pub fn from_slice(s: &mut [u8]) -> Buf {
        Buf::Raw {
            ptr: s.as_mut_ptr(),
            len: s.len(),
        }
    }

    pub fn from_ref(s: &[u8]) -> Buf {
        Buf::Raw {
            ptr: s.as_ptr() as *mut u8,
            len: s.len(),
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Buf::None => 0,
            Buf::Raw { len, .. } | Buf::Fixed { len, .. } => len,
            Buf::Group { len, .. } => len as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ptr(&self) -> *mut u8 {
        match *self {
            Buf::Raw { ptr, .. } | Buf::Fixed { ptr, .. } => ptr,
            Buf::None | Buf::Group { .. } => std::ptr::null_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoKind {
    Nop,
    Read,
    Write,
    Fsync { datasync: bool },
    NvmeRead,
    NvmeWrite,
    NvmeFlush,
    Send,
    Recv,
}

impl IoKind {
    pub fn name(self) -> &'static str {
        match self {
            IoKind::Nop => "nop",
            IoKind::Read => "read",
            IoKind::Write => "write",
            IoKind::Fsync { .. } => "fsync",
            IoKind::NvmeRead => "nvme-read",
            IoKind::NvmeWrite => "nvme-write",
            IoKind::NvmeFlush => "nvme-flush",
            IoKind::Send => "send",
            IoKind::Recv => "recv",
        }
    }

    pub fn is_storage(self) -> bool {
        matches!(
            self,
            IoKind::Read
                | IoKind::Write
                | IoKind::Fsync { .. }
                | IoKind::NvmeRead
                | IoKind::NvmeWrite
                | IoKind::NvmeFlush
        )
    }

    pub fn is_socket(self) -> bool {
        matches!(self, IoKind::Send | IoKind::Recv)
    }

    pub fn is_nvme(self) -> bool {
        matches!(self, IoKind::NvmeRead | IoKind::NvmeWrite | IoKind::NvmeFlush)
    }

    /// Kinds that carry a data transfer at a byte offset.
    pub fn is_positioned(self) -> bool {
        matches!(
            self,
            IoKind::Read | IoKind::Write | IoKind::NvmeRead | IoKind::NvmeWrite
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReqFlags {
    /// The next staged request starts only after this one succeeds.
    pub link_next: bool,
    /// Cancel this request if it has not completed this many microseconds
    /// after it became runnable. Only valid on the target of a link.
    pub link_timeout_us: Option<u64>,
    pub zero_copy: bool,
    pub multishot: bool,
    pub poll_first: bool,
    /// Receive into a kernel-selected provided buffer; requires [`Buf::Group`].
    pub provided_buffers: bool,
}

/// One queued I/O operation.
#[derive(Debug, Clone, Copy)]
pub struct IoRequest {
    pub tag: u64,
    pub kind: IoKind,
    pub target: Target,
    pub offset: u64,
    pub buf: Buf,
    pub flags: ReqFlags,
}

// SAFETY: the raw buffer pointers are plain addresses; validity for the
// lifetime of the request is the caller's contract at enqueue time.
unsafe impl Send for IoRequest {}
unsafe impl Send for Buf {}

impl IoRequest {
    pub fn new(kind: IoKind, target: Target) -> IoRequest {
        IoRequest {
            tag: 0,
            kind,
            target,
            offset: 0,
            buf: Buf::None,
            flags: ReqFlags::default(),
        }
    }

    pub fn nop() -> IoRequest {
        IoRequest::new(IoKind::Nop, Target::Fd(FileDesc::buffered(-1)))
    }

    pub fn read(target: impl Into<Target>, offset: u64, buf: Buf) -> IoRequest {
        IoRequest {
            offset,
            buf,
            ..IoRequest::new(IoKind::Read, target.into())
        }
    }

    pub fn write(target: impl Into<Target>, offset: u64, buf: Buf) -> IoRequest {
        IoRequest {
            offset,
            buf,
            ..IoRequest::new(IoKind::Write, target.into())
        }
    }

    pub fn fsync(target: impl Into<Target>, datasync: bool) -> IoRequest {
        IoRequest::new(IoKind::Fsync { datasync }, target.into())
    }

    pub fn send(target: impl Into<Target>, buf: Buf) -> IoRequest {
        IoRequest {
            buf,
            ..IoRequest::new(IoKind::Send, target.into())
        }
    }

    pub fn recv(target: impl Into<Target>, buf: Buf) -> IoRequest {
        IoRequest {
            buf,
            ..IoRequest::new(IoKind::Recv, target.into())
        }
    }

    pub fn tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }

    pub fn link_next(mut self) -> Self {
        self.flags.link_next = true;
        self
    }

    pub fn link_timeout(mut self, us: u64) -> Self {
        self.flags.link_timeout_us = Some(us);
        self
    }

    pub fn zero_copy(mut self, on: bool) -> Self {
        self.flags.zero_copy = on;
        self
    }

    pub fn poll_first(mut self, on: bool) -> Self {
        self.flags.poll_first = on;
        self
    }

    pub fn multishot(mut self, on: bool) -> Self {
        self.flags.multishot = on;
        self
    }

    /// Kind-independent flag rules; alignment and table checks live in the ring.
    pub(crate) fn check_flags(&self) -> Result<(), &'static str> {
        let f = &self.flags;
        if f.multishot && self.kind != IoKind::Recv {
            return Err("multishot applies only to receive");
        }
        if f.provided_buffers && self.kind != IoKind::Recv {
            return Err("provided buffers apply only to receive");
        }
        if f.provided_buffers != matches!(self.buf, Buf::Group { .. }) {
            return Err("provided-buffer flag and buffer group must be used together");
        }
        if f.multishot && !f.provided_buffers {
            return Err("multishot receive requires a provided-buffer group");
        }
        if f.zero_copy && !self.kind.is_socket() {
            return Err("zero-copy applies only to send and receive");
        }
        if f.poll_first && !self.kind.is_socket() {
            return Err("poll-first applies only to send and receive");
        }
        Ok(())
    }
}

/// Sequence number handed out by `enqueue`, strictly increasing per ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoStatus {
    Ok,
    /// Positive errno.
    Error(i32),
}

/// Result of one request (or one multishot event).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoCompletion {
    pub tag: u64,
    pub status: IoStatus,
    pub bytes: u32,
    pub more_coming: bool,
    pub buffer_id: Option<u16>,
}

impl IoCompletion {
    pub fn ok(tag: u64, bytes: u32) -> Self {
        IoCompletion {
            tag,
            status: IoStatus::Ok,
            bytes,
            more_coming: false,
            buffer_id: None,
        }
    }

    pub fn error(tag: u64, errno: i32) -> Self {
        IoCompletion {
            tag,
            status: IoStatus::Error(errno),
            bytes: 0,
            more_coming: false,
            buffer_id: None,
        }
    }

    /// Builds a completion from a kernel-style result (negative errno on failure).
    pub fn from_result(tag: u64, res: i32) -> Self {
        if res < 0 {
            IoCompletion::error(tag, -res)
        } else {
            IoCompletion::ok(tag, res as u32)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == IoStatus::Ok
    }

    pub fn into_result(self) -> io::Result<u32> {
        match self.status {
            IoStatus::Ok => Ok(self.bytes),
            IoStatus::Error(e) => Err(io::Error::from_raw_os_error(e)),
        }
    }
}
