use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};

use super::*;
use crate::bufmgr::PoolConfig;
use crate::fiber::{SchedConfig, Scheduler, Until};
use crate::rt::{RingConfig, RingHandle, SimDeviceConfig, StorageFile};

struct Db {
    _dir: tempfile::TempDir,
    pool: Rc<BufferPool>,
}

fn empty_db(frames: usize) -> Db {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db");
    std::fs::File::create(&path).unwrap().write_all(&[0u8; 4096]).unwrap();
    let store = PageStore::new(StorageFile::open(&path, false, false).unwrap(), 4096);
    Db {
        _dir: dir,
        pool: Rc::new(BufferPool::new(PoolConfig::with_frames(frames), store, 0)),
    }
}

fn sched() -> Scheduler {
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default())).unwrap();
    Scheduler::new(ring, SchedConfig::default())
}

fn value(k: u64, salt: u64, vw: usize) -> Vec<u8> {
    (0..vw).map(|i| (k.wrapping_mul(31).wrapping_add(salt) as u8).wrapping_add(i as u8)).collect()
}

#[test]
fn fanout_arithmetic() {
    assert_eq!(leaf_fanout(4096, 128), 30);
    assert_eq!(inner_fanout(4096), 254);
    assert_eq!(bulk_page_count(1000, 4096, 128), (35, 2));
    assert_eq!(bulk_page_count(0, 4096, 128), (1, 1));
    assert_eq!(bulk_page_count(30, 4096, 128), (1, 1));
    assert_eq!(bulk_page_count(31, 4096, 128), (3, 2));
}

#[test]
fn first_insert_makes_leaf_root() {
    let db = empty_db(16);
    let pool = db.pool.clone();
    let mut s = sched();
    s.spawn(move |ctx| async move {
        let t = BTree::create(&ctx, pool, 128).await.unwrap();
        let (u, _) = t.upsert(&ctx, 5, &[1u8; 128]).await.unwrap();
        assert_eq!(u, Upsert::Inserted);
        assert_eq!(t.height(), 1);
        let r = t.pool().fix(&ctx, t.root(), Intent::Read).await.unwrap();
        assert_eq!(t.pool().with_page(&r, |p| (kind(p), count(p))), (LEAF, 1));
        t.pool().unfix(r.pid, false).unwrap();
        let (u, _) = t.upsert(&ctx, 5, &[2u8; 128]).await.unwrap();
        assert_eq!(u, Upsert::Updated);
        assert_eq!(t.lookup(&ctx, 5).await.unwrap(), Some(vec![2u8; 128]));
        assert_eq!(t.lookup(&ctx, 6).await.unwrap(), None);
        assert!(matches!(t.upsert(&ctx, 1, &[0u8; 3]).await, Err(TreeError::ValueWidth { .. })));
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
}

#[test]
fn sequential_inserts_split() {
    let db = empty_db(64);
    let pool = db.pool.clone();
    let mut s = sched();
    s.spawn(move |ctx| async move {
        let t = BTree::create(&ctx, pool, 128).await.unwrap();
        let mut splits = 0;
        for k in 0..2000u64 {
            splits += t.upsert(&ctx, k, &value(k, 0, 128)).await.unwrap().1.splits;
        }
        assert!(splits >= 1);
        assert!(t.height() >= 2);
        for k in 0..2000u64 {
            assert_eq!(t.lookup(&ctx, k).await.unwrap(), Some(value(k, 0, 128)));
        }
        let mut keys = Vec::new();
        t.scan(&ctx, |k, _| keys.push(k)).await.unwrap();
        assert_eq!(keys, (0..2000).collect::<Vec<_>>());
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
}

#[test]
fn random_upserts_match_map_small_pool() {
    let db = empty_db(64);
    let pool = db.pool.clone();
    let mut s = sched();
    s.spawn(move |ctx| async move {
        let t = BTree::create(&ctx, pool, 128).await.unwrap();
        let mut oracle = BTreeMap::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000u64 {
            let k = rng.gen_range(0..4000u64);
            let v = value(k, i, 128);
            let (u, _) = t.upsert(&ctx, k, &v).await.unwrap();
            let prev = oracle.insert(k, v);
            assert_eq!(u == Upsert::Updated, prev.is_some());
        }
        for _ in 0..10_000 {
            let k = rng.gen_range(0..4500u64);
            assert_eq!(t.lookup(&ctx, k).await.unwrap().as_ref(), oracle.get(&k));
        }
        let st = t.pool().stats();
        assert!(st.evictions > 0);
        // Only suspended traversals restart, and each suspension is a miss here.
        assert!(t.restarts() <= st.misses);
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
}

#[test]
fn epoch_change_during_suspension_restarts_once() {
    let db = empty_db(16);
    let pool = db.pool.clone();
    let mut s = sched();
    let tree: Rc<RefCell<Option<Rc<BTree>>>> = Rc::new(RefCell::new(None));
    let slot = tree.clone();
    s.spawn(move |ctx| async move {
        let t = BTree::create(&ctx, pool, 128).await.unwrap();
        for k in 0..100u64 {
            t.upsert(&ctx, k, &value(k, 0, 128)).await.unwrap();
        }
        let pool = t.pool().clone();
        pool.flush_all(&ctx).await.unwrap();
        // Push everything out so the next lookup must read.
        while pool.evict_batch(&ctx, 16).await.unwrap() > 0 {}
        *slot.borrow_mut() = Some(Rc::new(t));
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();

    let t = tree.borrow().clone().unwrap();
    let before = t.restarts();
    let t1 = t.clone();
    s.spawn(move |ctx| async move {
        let mut v = vec![0u8; 128];
        let (found, info) = t1.lookup_into(&ctx, 42, &mut v).await.unwrap();
        assert!(found);
        assert_eq!(v, value(42, 0, 128));
        assert_eq!(info.restarts, 1);
    })
    .unwrap();
    let t2 = t.clone();
    s.spawn(move |_| async move { t2.pool().bump_epoch() }).unwrap();
    s.run(Until::AllFinished).unwrap();
    assert_eq!(t.restarts(), before + 1);
}

#[test]
fn concurrent_fibers_match_map() {
    let db = empty_db(96);
    let pool = db.pool.clone();
    let mut s = sched();
    let tree: Rc<RefCell<Option<Rc<BTree>>>> = Rc::new(RefCell::new(None));
    let slot = tree.clone();
    s.spawn(move |ctx| async move {
        *slot.borrow_mut() = Some(Rc::new(BTree::create(&ctx, pool, 32).await.unwrap()));
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    let t = tree.borrow().clone().unwrap();
    // Each fiber owns a disjoint key stripe, so the final map is order independent.
    for f in 0..16u64 {
        let t = t.clone();
        s.spawn(move |ctx| async move {
            for i in 0..300u64 {
                let k = i * 16 + f;
                t.upsert(&ctx, k, &value(k, 1, 32)).await.unwrap();
            }
        })
        .unwrap();
    }
    s.run(Until::AllFinished).unwrap();
    let t2 = t.clone();
    s.spawn(move |ctx| async move {
        let mut keys = Vec::new();
        t2.scan(&ctx, |k, v| {
            assert_eq!(v, &value(k, 1, 32)[..]);
            keys.push(k);
        })
        .await
        .unwrap();
        assert_eq!(keys, (0..4800).collect::<Vec<_>>());
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    t.pool().check_invariants().unwrap();
}

#[test]
fn bulk_load_layout_and_lookups() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db");
    let load = |path: &std::path::Path| {
        let store = PageStore::new(StorageFile::open(path, false, true).unwrap(), 4096);
        bulk_load(&store, 128, (0..1000u64).map(|k| (k, value(k, 9, 128)))).unwrap()
    };
    let h = load(&path);
    assert_eq!((h.page_count, h.height, h.root, h.tuples), (35, 2, 34, 1000));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 36 * 4096);
    let p2 = dir.path().join("db2");
    load(&p2);
    assert_eq!(bytes, std::fs::read(&p2).unwrap());

    let store = PageStore::new(StorageFile::open(&path, false, false).unwrap(), 4096);
    assert_eq!(store.read_header().unwrap(), h);
    let pool = Rc::new(BufferPool::new(PoolConfig::with_frames(8), store, h.page_count));
    let t = Rc::new(BTree::open(pool, &h).unwrap());
    let mut s = sched();
    s.spawn(move |ctx| async move {
        for k in (0..1000u64).step_by(7) {
            assert_eq!(t.lookup(&ctx, k).await.unwrap(), Some(value(k, 9, 128)));
        }
        assert_eq!(t.lookup(&ctx, 1000).await.unwrap(), None);
        t.upsert(&ctx, 5000, &value(5000, 0, 128)).await.unwrap();
        assert_eq!(t.lookup(&ctx, 5000).await.unwrap(), Some(value(5000, 0, 128)));
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
}
