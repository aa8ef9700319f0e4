//! Frame metadata, page table and clock sweep, without any I/O.

use std::collections::{HashMap, VecDeque};

use super::PoolError;

pub type PageId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameState {
    Free,
    /// A read into the frame is in flight.
    Loading,
    Resident,
    /// Chosen as a victim; write-back (if dirty) is in flight.
    Evicting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameMeta {
    pub page: Option<PageId>,
    pub state: FrameState,
    pub pin: u32,
    pub ref_bit: bool,
    pub dirty: bool,
}

impl FrameMeta {
    const FREE: FrameMeta = FrameMeta {
        page: None,
        state: FrameState::Free,
        pin: 0,
        ref_bit: false,
        dirty: false,
    };

    fn evictable(&self) -> bool {
        self.state == FrameState::Resident && self.pin == 0
    }
}

/// Selects up to `k` victims by second-chance clock.
///
/// Starting at `hand`, each resident unpinned frame with its reference bit
/// set loses the bit; one with the bit clear becomes a victim. The scan
/// stops after `k` victims or two full revolutions. `hand` ends one past
/// the last frame examined.
pub fn clock_sweep(hand: &mut usize, frames: &mut [FrameMeta], k: usize) -> Vec<usize> {
    let n = frames.len();
    let mut victims = Vec::with_capacity(k);
    if n == 0 || k == 0 {
        return victims;
    }
    for _ in 0..2 * n {
        let i = *hand;
        *hand = (*hand + 1) % n;
        let f = &mut frames[i];
        if !f.evictable() || victims.contains(&i) {
            continue;
        }
        if f.ref_bit {
            f.ref_bit = false;
        } else {
            victims.push(i);
            if victims.len() == k {
                break;
            }
        }
    }
    victims
}

/// Outcome of a page-table probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Resident; the frame was pinned and referenced.
    Hit(usize),
    /// Mapped but a read or write-back is in flight.
    Busy(usize),
    Miss,
}

/// Synchronous state of a buffer pool: frames, page table, free list and
/// clock hand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolCore {
    pub frames: Vec<FrameMeta>,
    pub table: HashMap<PageId, usize>,
    pub free: VecDeque<usize>,
    pub hand: usize,
}

impl PoolCore {
    pub fn new(n: usize) -> PoolCore {
        PoolCore {
            frames: vec![FrameMeta::FREE; n],
            table: HashMap::with_capacity(n),
            free: (0..n).collect(),
            hand: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn probe(&mut self, pid: PageId) -> Probe {
        match self.table.get(&pid) {
            None => Probe::Miss,
            Some(&f) => {
                let m = &mut self.frames[f];
                if m.state == FrameState::Resident {
                    m.pin += 1;
                    m.ref_bit = true;
                    Probe::Hit(f)
                } else {
                    Probe::Busy(f)
                }
            }
        }
    }

    pub fn take_free(&mut self) -> Option<usize> {
        self.free.pop_front()
    }

    pub fn return_free(&mut self, f: usize) {
        self.free.push_front(f);
    }

    /// Maps `pid` to free frame `f`, pinned, with a read pending.
    pub fn begin_load(&mut self, pid: PageId, f: usize) {
        debug_assert_eq!(self.frames[f].state, FrameState::Free);
        self.frames[f] = FrameMeta {
            page: Some(pid),
            state: FrameState::Loading,
            pin: 1,
            ref_bit: true,
            dirty: false,
        };
        self.table.insert(pid, f);
    }

    /// Maps a brand-new page to `f` without a read; it starts dirty.
    pub fn install_new(&mut self, pid: PageId, f: usize) {
        self.frames[f] = FrameMeta {
            page: Some(pid),
            state: FrameState::Resident,
            pin: 1,
            ref_bit: true,
            dirty: true,
        };
        self.table.insert(pid, f);
    }

    pub fn finish_load(&mut self, f: usize, ok: bool) {
        if ok {
            self.frames[f].state = FrameState::Resident;
        } else {
            let pid = self.frames[f].page.expect("loading frame has a page");
            self.table.remove(&pid);
            self.frames[f] = FrameMeta::FREE;
            self.free.push_back(f);
        }
    }

    pub fn unfix(&mut self, pid: PageId, dirty: bool) -> Result<(), PoolError> {
        let f = *self.table.get(&pid).ok_or(PoolError::NotFixed(pid))?;
        let m = &mut self.frames[f];
        if m.pin == 0 || m.state != FrameState::Resident {
            return Err(PoolError::NotFixed(pid));
        }
        m.pin -= 1;
        m.dirty |= dirty;
        Ok(())
    }

    /// Runs the clock and marks the chosen frames as evicting.
    pub fn select_victims(&mut self, k: usize) -> Vec<usize> {
        let v = clock_sweep(&mut self.hand, &mut self.frames, k);
        for &f in &v {
            self.frames[f].state = FrameState::Evicting;
        }
        v
    }

    /// Unmaps written-back victims and appends them to the free list in order.
    pub fn finish_evict(&mut self, victims: &[usize]) {
        for &f in victims {
            let pid = self.frames[f].page.expect("victim has a page");
            self.table.remove(&pid);
            self.frames[f] = FrameMeta::FREE;
            self.free.push_back(f);
        }
    }

    /// Puts a victim whose write-back failed back in service, still dirty.
    pub fn abort_evict(&mut self, f: usize) {
        self.frames[f].state = FrameState::Resident;
    }

    pub fn evicting(&self) -> usize {
        self.frames
            .iter()
            .filter(|m| m.state == FrameState::Evicting)
            .count()
    }

    pub fn pinned(&self) -> usize {
        self.frames.iter().filter(|m| m.pin > 0).count()
    }

    /// Page table is a bijection onto mapped frames; free frames are unmapped.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (&pid, &f) in &self.table {
            if self.frames[f].page != Some(pid) {
                return Err(format!("table maps {pid} to frame {f} holding {:?}", self.frames[f].page));
            }
        }
        let mapped = self.frames.iter().filter(|m| m.page.is_some()).count();
        if mapped != self.table.len() {
            return Err(format!("{mapped} mapped frames, {} table entries", self.table.len()));
        }
        for &f in &self.free {
            let m = &self.frames[f];
            if m.state != FrameState::Free || m.page.is_some() {
                return Err(format!("free frame {f} is {m:?}"));
            }
        }
        let free_state = self
            .frames
            .iter()
            .filter(|m| m.state == FrameState::Free)
            .count();
        if free_state != self.free.len() {
            return Err(format!("{free_state} free frames, free list {}", self.free.len()));
        }
        for (i, m) in self.frames.iter().enumerate() {
            if m.dirty && m.page.is_none() {
                return Err(format!("frame {i} dirty without a page"));
            }
        }
        Ok(())
    }
}
