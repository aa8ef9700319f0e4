//! B+tree against an ordered map, and pool write-back against a shadow copy.

#![allow(dead_code)]

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uring_engine::btree::{BTree, Upsert};
use uring_engine::bufmgr::{BufferPool, Intent, PageStore, PoolConfig};
use uring_engine::fiber::{SchedConfig, Scheduler, Until};
use uring_engine::rt::{RingConfig, RingHandle, SimDeviceConfig, StorageFile};

const PAGE: usize = 4096;

fn sched() -> Scheduler {
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default()).depth(256)).unwrap();
    Scheduler::new(ring, SchedConfig::default())
}

fn zero_file(pages: usize) -> tempfile::NamedTempFile {
    let mut t = tempfile::NamedTempFile::new().unwrap();
    t.write_all(&vec![0u8; (pages + 1) * PAGE]).unwrap();
    t
}

fn value(k: u64, salt: u64, vw: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(k ^ salt.rotate_left(32));
    (0..vw).map(|_| rng.gen()).collect()
}

/// Mixed random upserts and lookups on a tree over a `frames`-page pool.
/// Returns the number of operations whose result differs from the map.
pub fn tree_vs_map(ops: usize, frames: usize, seed: u64) -> usize {
    let file = zero_file(0);
    let store = PageStore::new(StorageFile::open(file.path(), false, false).unwrap(), PAGE);
    let pool = Rc::new(BufferPool::new(PoolConfig::with_frames(frames), store, 0));
    let divergences = Rc::new(Cell::new(0usize));
    let out = divergences.clone();
    let mut s = sched();
    s.spawn(move |ctx| async move {
        let vw = 64;
        let t = BTree::create(&ctx, pool, vw).await.unwrap();
        let mut oracle = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain = (ops as u64 / 3).max(10);
        for i in 0..ops as u64 {
            let k = rng.gen_range(0..domain);
            if rng.gen_bool(0.5) {
                let v = value(k, i, vw);
                let (u, _) = t.upsert(&ctx, k, &v).await.unwrap();
                let prev = oracle.insert(k, v);
                if (u == Upsert::Updated) != prev.is_some() {
                    out.set(out.get() + 1);
                }
            } else if t.lookup(&ctx, k).await.unwrap().as_ref() != oracle.get(&k) {
                out.set(out.get() + 1);
            }
        }
        let mut scanned = Vec::new();
        t.scan(&ctx, |k, v| scanned.push((k, v.to_vec()))).await.unwrap();
        let want: Vec<(u64, Vec<u8>)> = oracle.into_iter().collect();
        if scanned != want {
            out.set(out.get() + 1);
        }
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    divergences.get()
}

/// Random page writes through a small pool, then `flush_all`. Returns the
/// number of pages whose file bytes differ from the shadow copy.
pub fn flush_vs_shadow(ops: usize, frames: usize, pages: u64, seed: u64) -> usize {
    let file = zero_file(pages as usize);
    let store = PageStore::new(StorageFile::open(file.path(), false, false).unwrap(), PAGE);
    let pool = Rc::new(BufferPool::new(PoolConfig::with_frames(frames), store, pages));
    let shadow = Rc::new(std::cell::RefCell::new(vec![vec![0u8; PAGE]; pages as usize]));
    let bad_reads = Rc::new(Cell::new(0usize));
    let (sh, br) = (shadow.clone(), bad_reads.clone());
    let mut s = sched();
    s.spawn(move |ctx| async move {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..ops {
            let pid = rng.gen_range(0..pages);
            let r = pool.fix(&ctx, pid, Intent::Write).await.unwrap();
            let seen = pool.with_page(&r, |p| p.to_vec());
            if seen != sh.borrow()[pid as usize] {
                br.set(br.get() + 1);
            }
            let write = rng.gen_bool(0.6);
            if write {
                let at = rng.gen_range(0..PAGE);
                let len = rng.gen_range(1..=(PAGE - at).min(256));
                let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                pool.with_page_mut(&r, |p| p[at..at + len].copy_from_slice(&bytes));
                sh.borrow_mut()[pid as usize][at..at + len].copy_from_slice(&bytes);
            }
            pool.unfix(pid, write).unwrap();
        }
        pool.flush_all(&ctx).await.unwrap();
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    let bytes = std::fs::read(file.path()).unwrap();
    let differing = shadow
        .borrow()
        .iter()
        .enumerate()
        .filter(|(p, want)| &bytes[(p + 1) * PAGE..(p + 2) * PAGE] != want.as_slice())
        .count();
    differing + bad_reads.get()
}
