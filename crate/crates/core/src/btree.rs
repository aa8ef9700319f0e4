//! Page-based B+tree with fixed-width entries on top of the buffer pool.
//!
//! Pages start with a 16-byte header `{kind u16, count u16, reserved u32,
//! aux u64}`. Leaves hold `count` sorted `(key u64, value)` pairs. Inner
//! nodes hold `child[0]` followed by `count` pairs `(key, child[i+1])`;
//! keys below `key[0]` live under `child[0]`.
//!
//! A traversal that was suspended while the global epoch moved restarts
//! from the root. The epoch advances on splits and on evictions.

use std::cell::{Cell, RefCell};
use std::io;
use std::os::unix::fs::FileExt;
use std::rc::Rc;

use thiserror::Error;

use crate::bufmgr::{AlignedPage, BufferPool, FileHeader, FrameRef, Intent, PageId, PageStore, PoolError};
use crate::fiber::IoCtx;

pub const HEADER: usize = 16;
pub const KEY: usize = 8;
pub const DEFAULT_MAX_RESTARTS: u32 = 64;

const LEAF: u16 = 1;
const INNER: u16 = 2;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("traversal restarted {0} times")]
    TooManyRestarts(u32),
    #[error("invalid tree configuration: {0}")]
    Config(String),
    #[error("value has {got} bytes, tree stores {expected}")]
    ValueWidth { expected: usize, got: usize },
}

/// Entries per leaf for the given page size and value width.
pub fn leaf_fanout(page_size: usize, value_width: usize) -> usize {
    (page_size - HEADER) / (KEY + value_width)
}

/// Keys per inner node; an inner node has one more child than keys.
pub fn inner_fanout(page_size: usize) -> usize {
    (page_size - HEADER - 8) / 16
}

/// Pages a bulk load of `tuples` entries produces with full leaves.
pub fn bulk_page_count(tuples: u64, page_size: usize, value_width: usize) -> (u64, u32) {
    let leaves = tuples.div_ceil(leaf_fanout(page_size, value_width) as u64).max(1);
    let per_inner = inner_fanout(page_size) as u64 + 1;
    let (mut total, mut level, mut height) = (leaves, leaves, 1u32);
    while level > 1 {
        level = level.div_ceil(per_inner);
        total += level;
        height += 1;
    }
    (total, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsert {
    Inserted,
    Updated,
}

/// Per-operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpInfo {
    /// Fixes served by a storage read.
    pub faults: u32,
    pub restarts: u32,
    pub splits: u32,
}

fn get_u16(p: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([p[o], p[o + 1]])
}

fn get_u64(p: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(p[o..o + 8].try_into().unwrap())
}

fn put_u64(p: &mut [u8], o: usize, v: u64) {
    p[o..o + 8].copy_from_slice(&v.to_le_bytes());
}

fn kind(p: &[u8]) -> u16 {
    get_u16(p, 0)
}

fn count(p: &[u8]) -> usize {
    get_u16(p, 2) as usize
}

fn set_header(p: &mut [u8], kind: u16, count: usize) {
    p[0..2].copy_from_slice(&kind.to_le_bytes());
    p[2..4].copy_from_slice(&(count as u16).to_le_bytes());
    p[4..8].fill(0);
    put_u64(p, 8, u64::MAX);
}

fn set_count(p: &mut [u8], count: usize) {
    p[2..4].copy_from_slice(&(count as u16).to_le_bytes());
}

/// Position of `key` among a leaf's entries.
fn leaf_search(p: &[u8], key: u64, entry: usize) -> Result<usize, usize> {
    let (mut lo, mut hi) = (0, count(p));
    while lo < hi {
        let mid = (lo + hi) / 2;
        let k = get_u64(p, HEADER + mid * entry);
        match k.cmp(&key) {
            std::cmp::Ordering::Less => lo = mid + 1,
            std::cmp::Ordering::Greater => hi = mid,
            std::cmp::Ordering::Equal => return Ok(mid),
        }
    }
    Err(lo)
}

fn inner_key(p: &[u8], i: usize) -> u64 {
    get_u64(p, HEADER + 8 + 16 * i)
}

fn inner_child(p: &[u8], i: usize) -> u64 {
    if i == 0 {
        get_u64(p, HEADER)
    } else {
        get_u64(p, HEADER + 16 * i)
    }
}

/// Child slot covering `key`: the number of separators `<= key`.
fn inner_slot(p: &[u8], key: u64) -> usize {
    let (mut lo, mut hi) = (0, count(p));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if inner_key(p, mid) <= key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

fn leaf_insert(p: &mut [u8], at: usize, key: u64, value: &[u8], entry: usize) {
    let n = count(p);
    let start = HEADER + at * entry;
    p.copy_within(start..HEADER + n * entry, start + entry);
    put_u64(p, start, key);
    p[start + KEY..start + entry].copy_from_slice(value);
    set_count(p, n + 1);
}

/// Decoded inner node used while splitting.
struct Inner {
    keys: Vec<u64>,
    children: Vec<u64>,
}

impl Inner {
    fn read(p: &[u8]) -> Inner {
        let n = count(p);
        Inner {
            keys: (0..n).map(|i| inner_key(p, i)).collect(),
            children: (0..=n).map(|i| inner_child(p, i)).collect(),
        }
    }

    fn write(&self, p: &mut [u8]) {
        set_header(p, INNER, self.keys.len());
        put_u64(p, HEADER, self.children[0]);
        for (i, k) in self.keys.iter().enumerate() {
            put_u64(p, HEADER + 8 + 16 * i, *k);
            put_u64(p, HEADER + 16 * (i + 1), self.children[i + 1]);
        }
    }
}

pub struct BTree {
    pool: Rc<BufferPool>,
    root: Cell<PageId>,
    height: Cell<u32>,
    value_width: usize,
    leaf_cap: usize,
    inner_cap: usize,
    max_restarts: u32,
    restarts: Cell<u64>,
    /// Pages allocated for a split that was abandoned by a restart.
    spare: RefCell<Vec<PageId>>,
}

impl BTree {
    /// Opens the tree described by `header` on `pool`.
    pub fn open(pool: Rc<BufferPool>, header: &FileHeader) -> Result<BTree, TreeError> {
        let ps = pool.page_size();
        let vw = header.value_width as usize;
        if vw == 0 || leaf_fanout(ps, vw) < 2 {
            return Err(TreeError::Config(format!("value width {vw} on {ps}-byte pages")));
        }
        Ok(BTree {
            root: Cell::new(header.root),
            height: Cell::new(header.height.max(1)),
            value_width: vw,
            leaf_cap: leaf_fanout(ps, vw),
            inner_cap: inner_fanout(ps),
            max_restarts: DEFAULT_MAX_RESTARTS,
            restarts: Cell::new(0),
            spare: RefCell::new(Vec::new()),
            pool,
        })
    }

    /// Creates an empty tree: a single empty leaf as root.
    pub async fn create(ctx: &IoCtx, pool: Rc<BufferPool>, value_width: usize) -> Result<BTree, TreeError> {
        let header = FileHeader {
            page_size: pool.page_size() as u32,
            value_width: value_width as u32,
            height: 1,
            root: pool.page_count(),
            ..FileHeader::default()
        };
        let tree = BTree::open(pool, &header)?;
        let r = tree.pool.fix_new(ctx).await?;
        tree.pool.with_page_mut(&r, |p| set_header(p, LEAF, 0));
        tree.pool.unfix(r.pid, true)?;
        tree.root.set(r.pid);
        Ok(tree)
    }

    pub fn pool(&self) -> &Rc<BufferPool> {
        &self.pool
    }

    pub fn root(&self) -> PageId {
        self.root.get()
    }

    pub fn height(&self) -> u32 {
        self.height.get()
    }

    pub fn value_width(&self) -> usize {
        self.value_width
    }

    pub fn restarts(&self) -> u64 {
        self.restarts.get()
    }

    pub fn set_max_restarts(&mut self, n: u32) {
        self.max_restarts = n;
    }

    fn entry(&self) -> usize {
        KEY + self.value_width
    }

    fn release(&self, path: &[FrameRef], dirty: bool) {
        for r in path {
            self.pool.unfix(r.pid, dirty).expect("path page is fixed");
        }
    }

    fn restarted(&self, info: &mut OpInfo) -> Result<(), TreeError> {
        info.restarts += 1;
        self.restarts.set(self.restarts.get() + 1);
        if info.restarts > self.max_restarts {
            return Err(TreeError::TooManyRestarts(info.restarts));
        }
        Ok(())
    }

    /// Looks up `key`, copying its value into `out`.
    pub async fn lookup_into(&self, ctx: &IoCtx, key: u64, out: &mut [u8]) -> Result<(bool, OpInfo), TreeError> {
        let mut info = OpInfo::default();
        let entry = self.entry();
        'restart: loop {
            let epoch = self.pool.epoch();
            let mut pid = self.root.get();
            let mut parent: Option<FrameRef> = None;
            loop {
                let fixed = self.pool.fix(ctx, pid, Intent::Read).await;
                if let Some(p) = parent.take() {
                    self.pool.unfix(p.pid, false)?;
                }
                let r = fixed?;
                info.faults += r.missed as u32;
                if r.suspended && self.pool.epoch() != epoch {
                    self.pool.unfix(r.pid, false)?;
                    self.restarted(&mut info)?;
                    continue 'restart;
                }
                let step = self.pool.with_page(&r, |p| {
                    if kind(p) == LEAF {
                        match leaf_search(p, key, entry) {
                            Ok(i) => {
                                let o = HEADER + i * entry + KEY;
                                out.copy_from_slice(&p[o..o + entry - KEY]);
                                Err(true)
                            }
                            Err(_) => Err(false),
                        }
                    } else {
                        Ok(inner_child(p, inner_slot(p, key)))
                    }
                });
                match step {
                    Ok(child) => {
                        parent = Some(r);
                        pid = child;
                    }
                    Err(found) => {
                        self.pool.unfix(r.pid, false)?;
                        return Ok((found, info));
                    }
                }
            }
        }
    }

    /// Applies `f` to the stored value of `key` in a single traversal.
    /// Returns whether the key exists; the leaf is marked dirty only if it does.
    pub async fn update_in_place(
        &self,
        ctx: &IoCtx,
        key: u64,
        mut f: impl FnMut(&mut [u8]),
    ) -> Result<(bool, OpInfo), TreeError> {
        let mut info = OpInfo::default();
        let entry = self.entry();
        'restart: loop {
            let epoch = self.pool.epoch();
            let mut pid = self.root.get();
            let mut parent: Option<FrameRef> = None;
            loop {
                let fixed = self.pool.fix(ctx, pid, Intent::Write).await;
                if let Some(p) = parent.take() {
                    self.pool.unfix(p.pid, false)?;
                }
                let r = fixed?;
                info.faults += r.missed as u32;
                if r.suspended && self.pool.epoch() != epoch {
                    self.pool.unfix(r.pid, false)?;
                    self.restarted(&mut info)?;
                    continue 'restart;
                }
                let child = self
                    .pool
                    .with_page(&r, |p| (kind(p) != LEAF).then(|| inner_child(p, inner_slot(p, key))));
                if let Some(child) = child {
                    parent = Some(r);
                    pid = child;
                    continue;
                }
                let found = self.pool.with_page_mut(&r, |p| match leaf_search(p, key, entry) {
                    Ok(i) => {
                        let o = HEADER + i * entry + KEY;
                        f(&mut p[o..o + entry - KEY]);
                        true
                    }
                    Err(_) => false,
                });
                self.pool.unfix(r.pid, found)?;
                return Ok((found, info));
            }
        }
    }

    pub async fn lookup(&self, ctx: &IoCtx, key: u64) -> Result<Option<Vec<u8>>, TreeError> {
        let mut v = vec![0u8; self.value_width];
        let (found, _) = self.lookup_into(ctx, key, &mut v).await?;
        Ok(found.then_some(v))
    }

    async fn new_page(&self, ctx: &IoCtx) -> Result<FrameRef, TreeError> {
        let spare = self.spare.borrow_mut().pop();
        Ok(match spare {
            Some(pid) => {
                let mut r = self.pool.fix(ctx, pid, Intent::Write).await?;
                self.pool.with_page_mut(&r, |p| p.fill(0));
                r.missed = false;
                r
            }
            None => self.pool.fix_new(ctx).await?,
        })
    }

    /// Inserts or overwrites `key`.
    pub async fn upsert(&self, ctx: &IoCtx, key: u64, value: &[u8]) -> Result<(Upsert, OpInfo), TreeError> {
        if value.len() != self.value_width {
            return Err(TreeError::ValueWidth {
                expected: self.value_width,
                got: value.len(),
            });
        }
        let mut info = OpInfo::default();
        let entry = self.entry();
        'restart: loop {
            let epoch = self.pool.epoch();
            let mut path: Vec<FrameRef> = Vec::with_capacity(self.height.get() as usize);
            let mut pid = self.root.get();
            loop {
                let r = match self.pool.fix(ctx, pid, Intent::Write).await {
                    Ok(r) => r,
                    Err(e) => {
                        self.release(&path, false);
                        return Err(e.into());
                    }
                };
                info.faults += r.missed as u32;
                path.push(r);
                if r.suspended && self.pool.epoch() != epoch {
                    self.release(&path, false);
                    self.restarted(&mut info)?;
                    continue 'restart;
                }
                let next = self.pool.with_page(&r, |p| (kind(p) == INNER).then(|| inner_child(p, inner_slot(p, key))));
                match next {
                    Some(child) => pid = child,
                    None => break,
                }
            }
            let leaf = *path.last().unwrap();
            let done = self.pool.with_page_mut(&leaf, |p| match leaf_search(p, key, entry) {
                Ok(i) => {
                    let o = HEADER + i * entry + KEY;
                    p[o..o + entry - KEY].copy_from_slice(value);
                    Some(Upsert::Updated)
                }
                Err(i) if count(p) < self.leaf_cap => {
                    leaf_insert(p, i, key, value, entry);
                    Some(Upsert::Inserted)
                }
                Err(_) => None,
            });
            if let Some(outcome) = done {
                let (upper, last) = path.split_at(path.len() - 1);
                self.release(upper, false);
                self.release(last, true);
                return Ok((outcome, info));
            }

            // Full leaf: count the full nodes above it that must split too.
            let mut splits = 1;
            for r in path[..path.len() - 1].iter().rev() {
                if self.pool.with_page(r, count) < self.inner_cap {
                    break;
                }
                splits += 1;
            }
            let need = splits + usize::from(splits == path.len());
            let mut fresh: Vec<FrameRef> = Vec::with_capacity(need);
            let mut suspended = false;
            for _ in 0..need {
                match self.new_page(ctx).await {
                    Ok(r) => {
                        suspended |= r.suspended;
                        fresh.push(r);
                    }
                    Err(e) => {
                        self.abandon(&fresh);
                        self.release(&path, false);
                        return Err(e);
                    }
                }
            }
            if suspended && self.pool.epoch() != epoch {
                self.abandon(&fresh);
                self.release(&path, false);
                self.restarted(&mut info)?;
                continue 'restart;
            }
            self.split_path(&path, &fresh, key, value);
            info.splits += splits as u32;
            self.pool.bump_epoch();
            self.release(&path, true);
            self.release(&fresh, true);
            return Ok((Upsert::Inserted, info));
        }
    }

    fn abandon(&self, fresh: &[FrameRef]) {
        self.release(fresh, true);
        self.spare.borrow_mut().extend(fresh.iter().map(|r| r.pid));
    }

    /// Splits the leaf and the full ancestors above it using the pinned
    /// `fresh` pages, inserting `key` on the way.
    fn split_path(&self, path: &[FrameRef], fresh: &[FrameRef], key: u64, value: &[u8]) {
        let entry = self.entry();
        let leaf = path[path.len() - 1];
        let right = fresh[0];
        // Leaf split: merge the new entry, then divide evenly.
        let sep = self.pool.with_pages_mut(&leaf, &right, |l, r| {
            let n = count(l);
            let mut all = Vec::with_capacity((n + 1) * entry);
            let at = leaf_search(l, key, entry).unwrap_err();
            all.extend_from_slice(&l[HEADER..HEADER + at * entry]);
            all.extend_from_slice(&key.to_le_bytes());
            all.extend_from_slice(value);
            all.extend_from_slice(&l[HEADER + at * entry..HEADER + n * entry]);
            let left_n = (n + 1).div_ceil(2);
            let right_n = n + 1 - left_n;
            set_header(l, LEAF, left_n);
            l[HEADER..HEADER + left_n * entry].copy_from_slice(&all[..left_n * entry]);
            set_header(r, LEAF, right_n);
            r[HEADER..HEADER + right_n * entry].copy_from_slice(&all[left_n * entry..]);
            get_u64(&all, left_n * entry)
        });
        let (mut sep, mut new_child) = (sep, right.pid);
        let mut used = 1;
        for level in (0..path.len() - 1).rev() {
            let node = path[level];
            let mut inner = self.pool.with_page(&node, Inner::read);
            let slot = inner.keys.partition_point(|&k| k <= sep);
            inner.keys.insert(slot, sep);
            inner.children.insert(slot + 1, new_child);
            if inner.keys.len() <= self.inner_cap {
                self.pool.with_page_mut(&node, |p| inner.write(p));
                return;
            }
            // Split the overfull node; the middle key moves up.
            let sib = fresh[used];
            used += 1;
            let mid = inner.keys.len() / 2;
            let up = inner.keys[mid];
            let right = Inner {
                keys: inner.keys[mid + 1..].to_vec(),
                children: inner.children[mid + 1..].to_vec(),
            };
            inner.keys.truncate(mid);
            inner.children.truncate(mid + 1);
            self.pool.with_pages_mut(&node, &sib, |l, r| {
                inner.write(l);
                right.write(r);
            });
            sep = up;
            new_child = sib.pid;
        }
        // The root split: grow the tree by one level.
        let root = fresh[used];
        let old = path[0].pid;
        self.pool.with_page_mut(&root, |p| {
            Inner {
                keys: vec![sep],
                children: vec![old, new_child],
            }
            .write(p)
        });
        self.root.set(root.pid);
        self.height.set(self.height.get() + 1);
    }

    pub fn header(&self, tuples: u64) -> FileHeader {
        FileHeader {
            page_size: self.pool.page_size() as u32,
            page_count: self.pool.page_count(),
            root: self.root.get(),
            height: self.height.get(),
            value_width: self.value_width as u32,
            tuples,
        }
    }

    /// Visits every leaf entry in key order. Test and verification aid.
    pub async fn scan(&self, ctx: &IoCtx, mut f: impl FnMut(u64, &[u8])) -> Result<(), TreeError> {
        let entry = self.entry();
        let mut stack = vec![self.root.get()];
        while let Some(pid) = stack.pop() {
            let r = self.pool.fix(ctx, pid, Intent::Read).await?;
            self.pool.with_page(&r, |p| {
                if kind(p) == LEAF {
                    for i in 0..count(p) {
                        let o = HEADER + i * entry;
                        f(get_u64(p, o), &p[o + KEY..o + entry]);
                    }
                } else {
                    for i in (0..=count(p)).rev() {
                        stack.push(inner_child(p, i));
                    }
                }
            });
            self.pool.unfix(pid, false)?;
        }
        Ok(())
    }
}

/// Writes a tree holding `tuples` (strictly increasing keys) directly to
/// `store` with full leaves, then the header. Returns the header.
pub fn bulk_load<I>(store: &PageStore, value_width: usize, tuples: I) -> io::Result<FileHeader>
where
    I: IntoIterator<Item = (u64, Vec<u8>)>,
{
    let ps = store.page_size();
    let entry = KEY + value_width;
    let leaf_cap = leaf_fanout(ps, value_width);
    if value_width == 0 || leaf_cap < 2 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "value width does not fit a page"));
    }
    let file = store.file().file();
    let mut page = AlignedPage::new(ps);
    let mut next_pid: u64 = 0;
    let mut level: Vec<(u64, PageId)> = Vec::new();
    let mut n = 0usize;
    let mut first = 0u64;
    let mut last: Option<u64> = None;
    let mut total = 0u64;
    let mut flush_leaf = |page: &mut AlignedPage, n: usize, first: u64, level: &mut Vec<(u64, PageId)>| -> io::Result<()> {
        let p = page.as_mut();
        set_header(p, LEAF, n);
        file.write_all_at(p, store.offset(next_pid))?;
        level.push((first, next_pid));
        next_pid += 1;
        p.fill(0);
        Ok(())
    };
    for (key, value) in tuples {
        assert!(last.is_none_or(|l| key > l), "bulk load keys must increase");
        assert_eq!(value.len(), value_width);
        last = Some(key);
        if n == leaf_cap {
            flush_leaf(&mut page, n, first, &mut level)?;
            n = 0;
        }
        if n == 0 {
            first = key;
        }
        let o = HEADER + n * entry;
        let p = page.as_mut();
        put_u64(p, o, key);
        p[o + KEY..o + entry].copy_from_slice(&value);
        n += 1;
        total += 1;
    }
    if n > 0 || level.is_empty() {
        flush_leaf(&mut page, n, first, &mut level)?;
    }
    drop(flush_leaf);
    let mut height = 1;
    let per_inner = inner_fanout(ps) + 1;
    while level.len() > 1 {
        let mut up = Vec::with_capacity(level.len().div_ceil(per_inner));
        for group in level.chunks(per_inner) {
            let inner = Inner {
                keys: group[1..].iter().map(|(k, _)| *k).collect(),
                children: group.iter().map(|(_, c)| *c).collect(),
            };
            let p = page.as_mut();
            p.fill(0);
            inner.write(p);
            file.write_all_at(p, store.offset(next_pid))?;
            up.push((group[0].0, next_pid));
            next_pid += 1;
        }
        level = up;
        height += 1;
    }
    let header = FileHeader {
        page_size: ps as u32,
        page_count: next_pid,
        root: level[0].1,
        height,
        value_width: value_width as u32,
        tuples: total,
    };
    store.write_header(&header)?;
    Ok(header)
}

#[cfg(test)]
mod tests;
