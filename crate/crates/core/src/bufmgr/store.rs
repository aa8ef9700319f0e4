//! Backing file layout: a header page followed by data pages.

use std::io;
use std::os::unix::fs::FileExt;

use crate::rt::{FileDesc, StorageFile, Target};

pub const MAGIC: [u8; 4] = *b"UBPF";
pub const VERSION: u32 = 1;

/// Page 0 of the backing file. The first 20 bytes are the fixed header;
/// the tree fields follow and are zero for files without a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FileHeader {
    pub page_size: u32,
    pub page_count: u64,
    pub root: u64,
    pub height: u32,
    pub value_width: u32,
    pub tuples: u64,
}

impl FileHeader {
    pub const LEN: usize = 48;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut b = [0u8; Self::LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.page_size.to_le_bytes());
        b[12..20].copy_from_slice(&self.page_count.to_le_bytes());
        b[20..28].copy_from_slice(&self.root.to_le_bytes());
        b[28..32].copy_from_slice(&self.height.to_le_bytes());
        b[32..36].copy_from_slice(&self.value_width.to_le_bytes());
        b[40..48].copy_from_slice(&self.tuples.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> io::Result<FileHeader> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        if b.len() < Self::LEN || b[0..4] != MAGIC {
            return Err(bad("not a page file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported page file version"));
        }
        Ok(FileHeader {
            page_size: u32_at(8),
            page_count: u64_at(12),
            root: u64_at(20),
            height: u32_at(28),
            value_width: u32_at(32),
            tuples: u64_at(40),
        })
    }
}

/// How page reads and writes are issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PageIo {
    #[default]
    Standard,
    /// Native NVMe commands on a character device.
    Passthrough,
}

/// The backing file of a pool.
#[derive(Debug)]
pub struct PageStore {
    file: StorageFile,
    page_size: usize,
    target: Target,
    pub io: PageIo,
}

impl PageStore {
    pub fn new(file: StorageFile, page_size: usize) -> PageStore {
        let target = file.target();
        PageStore {
            file,
            page_size,
            target,
            io: PageIo::Standard,
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn desc(&self) -> FileDesc {
        self.file.desc()
    }

    pub fn target(&self) -> Target {
        self.target
    }

    /// Routes page I/O through a registered file index.
    pub fn use_fixed_file(&mut self, index: u32) {
        self.target = Target::Fixed(index);
    }

    pub fn offset(&self, pid: u64) -> u64 {
        (pid + 1) * self.page_size as u64
    }

    pub fn file(&self) -> &StorageFile {
        &self.file
    }

    pub fn write_header(&self, h: &FileHeader) -> io::Result<()> {
        let mut page = AlignedPage::new(self.page_size);
        page.as_mut()[..FileHeader::LEN].copy_from_slice(&h.encode());
        self.file.file().write_all_at(page.as_ref(), 0)
    }

    pub fn read_header(&self) -> io::Result<FileHeader> {
        let mut page = AlignedPage::new(self.page_size);
        self.file.file().read_exact_at(page.as_mut(), 0)?;
        FileHeader::decode(page.as_ref())
    }
}

/// One page-aligned heap page, usable with direct I/O.
pub struct AlignedPage {
    ptr: *mut u8,
    layout: std::alloc::Layout,
}

impl AlignedPage {
    pub fn new(len: usize) -> AlignedPage {
        let layout = std::alloc::Layout::from_size_align(len, 4096).expect("page layout");
        // SAFETY: non-zero size.
        let ptr = unsafe { std::alloc::alloc_zeroed(layout) };
        assert!(!ptr.is_null(), "out of memory");
        AlignedPage { ptr, layout }
    }
}

impl AsRef<[u8]> for AlignedPage {
    fn as_ref(&self) -> &[u8] {
        // SAFETY: owned allocation of layout.size() bytes.
        unsafe { std::slice::from_raw_parts(self.ptr, self.layout.size()) }
    }
}

impl AsMut<[u8]> for AlignedPage {
    fn as_mut(&mut self) -> &mut [u8] {
        // SAFETY: owned allocation of layout.size() bytes.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.layout.size()) }
    }
}

impl Drop for AlignedPage {
    fn drop(&mut self) {
        // SAFETY: allocated with this layout.
        unsafe { std::alloc::dealloc(self.ptr, self.layout) }
    }
}
