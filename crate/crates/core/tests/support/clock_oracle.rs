//! Brute-force model of a clock-replacement buffer pool, and drivers that
//! compare it against the real pool metadata and the real async pool.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::HashSet;
use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uring_engine::bufmgr::{
    BufferPool, FrameState, Intent, PageStore, PoolConfig, PoolCore, PoolError, Probe,
};
use uring_engine::fiber::{SchedConfig, Scheduler, Until};
use uring_engine::rt::{RingConfig, RingHandle, SimDeviceConfig, StorageFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub page: Option<u64>,
    pub pin: u32,
    pub ref_bit: bool,
    pub dirty: bool,
}

/// Comparable state: slots, hand and free list.
pub type Canon = (Vec<Slot>, usize, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Fix(u64),
    Unfix(u64, bool),
    Evict(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Hit(usize),
    Miss(usize),
    Exhausted,
    NotFixed,
    Evicted(usize),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub slots: Vec<Slot>,
    pub hand: usize,
    pub free: Vec<usize>,
    pub batch: usize,
}

impl Model {
    pub fn new(n: usize, batch: usize) -> Model {
        let empty = Slot {
            page: None,
            pin: 0,
            ref_bit: false,
            dirty: false,
        };
        Model {
            slots: vec![empty; n],
            hand: 0,
            free: (0..n).collect(),
            batch,
        }
    }

    /// Victims as the first `k` eligible frames ordered by the step at
    /// which the hand would take them: unreferenced frames in the first
    /// revolution, referenced ones only in the second.
    fn select(&mut self, k: usize) -> Vec<usize> {
        let n = self.slots.len();
        if n == 0 || k == 0 {
            return Vec::new();
        }
        let mut keyed: Vec<(usize, usize)> = Vec::new();
        for d in 0..n {
            let i = (self.hand + d) % n;
            let s = &self.slots[i];
            if s.page.is_some() && s.pin == 0 {
                keyed.push((if s.ref_bit { n + d } else { d }, i));
            }
        }
        keyed.sort();
        keyed.truncate(k);
        let steps = if keyed.len() == k {
            keyed.last().unwrap().0 + 1
        } else {
            2 * n
        };
        for d in 0..n.min(steps) {
            let i = (self.hand + d) % n;
            let s = &mut self.slots[i];
            if s.page.is_some() && s.pin == 0 {
                s.ref_bit = false;
            }
        }
        self.hand = (self.hand + steps) % n;
        keyed.into_iter().map(|(_, i)| i).collect()
    }

    fn release(&mut self, victims: &[usize]) {
        for &i in victims {
            self.slots[i] = Slot {
                page: None,
                pin: 0,
                ref_bit: false,
                dirty: false,
            };
            self.free.push(i);
        }
    }

    pub fn apply(&mut self, op: Op) -> Outcome {
        match op {
            Op::Fix(p) => {
                if let Some(i) = self.slots.iter().position(|s| s.page == Some(p)) {
                    self.slots[i].pin += 1;
                    self.slots[i].ref_bit = true;
                    return Outcome::Hit(i);
                }
                if self.free.is_empty() {
                    let v = self.select(self.batch);
                    if v.is_empty() {
                        return Outcome::Exhausted;
                    }
                    self.release(&v);
                }
                let i = self.free.remove(0);
                self.slots[i] = Slot {
                    page: Some(p),
                    pin: 1,
                    ref_bit: true,
                    dirty: false,
                };
                Outcome::Miss(i)
            }
            Op::Unfix(p, dirty) => match self.slots.iter().position(|s| s.page == Some(p)) {
                Some(i) if self.slots[i].pin > 0 => {
                    self.slots[i].pin -= 1;
                    self.slots[i].dirty |= dirty;
                    Outcome::Hit(i)
                }
                _ => Outcome::NotFixed,
            },
            Op::Evict(k) => {
                let v = self.select(k);
                self.release(&v);
                Outcome::Evicted(v.len())
            }
        }
    }

    pub fn canon(&self) -> Canon {
        (self.slots.clone(), self.hand, self.free.clone())
    }
}

pub fn canon_core(c: &PoolCore) -> Canon {
    let slots = c
        .frames
        .iter()
        .map(|m| Slot {
            page: m.page,
            pin: m.pin,
            ref_bit: m.ref_bit,
            dirty: m.dirty,
        })
        .collect();
    (slots, c.hand, c.free.iter().copied().collect())
}

/// Applies `op` to the synchronous pool core the way a single fiber
/// would drive it, completing all I/O immediately.
pub fn apply_core(c: &mut PoolCore, batch: usize, op: Op) -> Outcome {
    match op {
        Op::Fix(p) => match c.probe(p) {
            Probe::Hit(f) => Outcome::Hit(f),
            Probe::Busy(_) => unreachable!("no I/O in flight"),
            Probe::Miss => {
                if c.free.is_empty() {
                    let v = c.select_victims(batch);
                    if v.is_empty() {
                        return Outcome::Exhausted;
                    }
                    c.finish_evict(&v);
                }
                let f = c.take_free().unwrap();
                c.begin_load(p, f);
                c.finish_load(f, true);
                Outcome::Miss(f)
            }
        },
        Op::Unfix(p, d) => match c.unfix(p, d) {
            Ok(()) => Outcome::Hit(c.table[&p]),
            Err(_) => Outcome::NotFixed,
        },
        Op::Evict(k) => {
            let v = c.select_victims(k);
            c.finish_evict(&v);
            Outcome::Evicted(v.len())
        }
    }
}

fn alphabet(pages: u64, max_k: usize) -> Vec<Op> {
    let mut ops = Vec::new();
    for p in 0..pages {
        ops.push(Op::Fix(p));
        ops.push(Op::Unfix(p, false));
        ops.push(Op::Unfix(p, true));
    }
    for k in 1..=max_k {
        ops.push(Op::Evict(k));
    }
    ops
}

/// Explores every trace of up to `depth` operations for pools of
/// 1..=`max_pool` frames, merging traces that reach identical states.
/// Returns (states visited, divergences).
pub fn exhaustive(max_pool: usize, depth: usize) -> (usize, usize) {
    let mut visited = 0;
    let mut divergences = 0;
    for n in 1..=max_pool {
        for batch in 1..=n.min(2) {
            let ops = alphabet(n as u64 + 1, 2);
            let mut level: Vec<(PoolCore, Model)> = vec![(PoolCore::new(n), Model::new(n, batch))];
            let mut seen: HashSet<Canon> = HashSet::new();
            seen.insert(canon_core(&level[0].0));
            for _ in 0..depth {
                let mut next = Vec::new();
                for (core, model) in &level {
                    for &op in &ops {
                        let (mut c, mut m) = (core.clone(), model.clone());
                        let a = apply_core(&mut c, batch, op);
                        let b = m.apply(op);
                        visited += 1;
                        if a != b || canon_core(&c) != m.canon() || c.check_invariants().is_err() {
                            divergences += 1;
                            continue;
                        }
                        if seen.insert(canon_core(&c)) {
                            next.push((c, m));
                        }
                    }
                }
                level = next;
            }
        }
    }
    (visited, divergences)
}

struct PageFile {
    _file: tempfile::NamedTempFile,
    path: std::path::PathBuf,
}

fn page_file(pages: usize) -> PageFile {
    let mut t = tempfile::NamedTempFile::new().unwrap();
    t.write_all(&vec![0u8; (pages + 1) * 4096]).unwrap();
    let path = t.path().to_path_buf();
    PageFile { _file: t, path }
}

/// Replays `traces` random traces on real pools of up to `max_pool`
/// frames over the simulated device. Returns the number of divergences.
pub fn randomized(traces: usize, max_pool: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_pages = 2 * max_pool + 8;
    let file = page_file(max_pages);
    let mut divergences = 0;
    for _ in 0..traces {
        let n = rng.gen_range(1..=max_pool);
        let pages = rng.gen_range(n as u64 + 1..=2 * n as u64 + 8);
        let batch = rng.gen_range(1..=n.min(8));
        let len = rng.gen_range(1..=40);
        let trace: Vec<Op> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0..=5 => Op::Fix(rng.gen_range(0..pages)),
                6..=8 => Op::Unfix(rng.gen_range(0..pages), rng.gen_bool(0.5)),
                _ => Op::Evict(rng.gen_range(1..=batch)),
            })
            .collect();
        if !replay_on_pool(&file.path, n, pages, batch, &trace) {
            divergences += 1;
        }
    }
    divergences
}

fn replay_on_pool(path: &std::path::Path, n: usize, pages: u64, batch: usize, trace: &[Op]) -> bool {
    let store = PageStore::new(StorageFile::open(path, false, false).unwrap(), 4096);
    let pool = Rc::new(BufferPool::new(
        PoolConfig {
            frames: n,
            evict_batch: batch,
        },
        store,
        pages,
    ));
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default()).depth(64)).unwrap();
    let mut sched = Scheduler::new(ring, SchedConfig::default());
    let ok = Rc::new(RefCell::new(true));
    let (o, trace) = (ok.clone(), trace.to_vec());
    sched
        .spawn(move |ctx| async move {
            let mut model = Model::new(n, batch);
            for op in trace {
                let got = match op {
                    Op::Fix(p) => match pool.fix(&ctx, p, Intent::Read).await {
                        Ok(r) if r.missed => Outcome::Miss(r.frame),
                        Ok(r) => Outcome::Hit(r.frame),
                        Err(PoolError::PoolExhausted) => Outcome::Exhausted,
                        Err(e) => panic!("{e}"),
                    },
                    Op::Unfix(p, d) => match pool.unfix(p, d) {
                        Ok(()) => Outcome::Hit(pool.core_snapshot().table[&p]),
                        Err(_) => Outcome::NotFixed,
                    },
                    Op::Evict(k) => Outcome::Evicted(pool.evict_batch(&ctx, k).await.unwrap()),
                };
                let want = model.apply(op);
                let core = pool.core_snapshot();
                let busy = core
                    .frames
                    .iter()
                    .any(|m| m.state == FrameState::Loading || m.state == FrameState::Evicting);
                if got != want || canon_core(&core) != model.canon() || busy || core.check_invariants().is_err() {
                    *o.borrow_mut() = false;
                    return;
                }
            }
        })
        .unwrap();
    sched.run(Until::AllFinished).unwrap();
    let r = *ok.borrow();
    r
}
