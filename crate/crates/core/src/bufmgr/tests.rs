use std::cell::RefCell;
use std::future::Future;
use std::io::Write;
use std::rc::Rc;

use super::*;
use crate::fiber::{SchedConfig, Scheduler, Until};
use crate::rt::{RingConfig, SimDeviceConfig, StorageFile};

pub(crate) struct Fixture {
    _file: tempfile::NamedTempFile,
    pub pool: Rc<BufferPool>,
}

/// A pool of `frames` over a file with `pages` data pages, page i filled with byte i.
pub(crate) fn fixture(frames: usize, pages: u64) -> Fixture {
    let mut t = tempfile::NamedTempFile::new().unwrap();
    let ps = 4096;
    t.write_all(&vec![0xEE; ps]).unwrap();
    for i in 0..pages {
        t.write_all(&vec![i as u8; ps]).unwrap();
    }
    let f = StorageFile::open(t.path(), false, false).unwrap();
    let store = PageStore::new(f, ps);
    Fixture {
        _file: t,
        pool: Rc::new(BufferPool::new(PoolConfig::with_frames(frames), store, pages)),
    }
}

pub(crate) fn run_one<T: 'static, F, Fut>(f: F) -> T
where
    F: FnOnce(IoCtx) -> Fut,
    Fut: Future<Output = T> + 'static,
{
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default()).depth(64)).unwrap();
    let mut s = Scheduler::new(ring, SchedConfig::default());
    let out = Rc::new(RefCell::new(None));
    let o = out.clone();
    s.spawn(move |ctx| {
        let fut = f(ctx);
        async move {
            *o.borrow_mut() = Some(fut.await);
        }
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    let v = out.borrow_mut().take().unwrap();
    v
}

#[test]
fn second_fix_is_a_hit() {
    let fx = fixture(4, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        let a = pool.fix(&ctx, 1, Intent::Read).await.unwrap();
        assert!(a.missed);
        let b = pool.fix(&ctx, 1, Intent::Read).await.unwrap();
        assert!(!b.missed);
        assert_eq!(pool.core_snapshot().frames[a.frame].pin, 2);
        assert_eq!(pool.with_page(&a, |p| p[0]), 1);
    });
}

#[test]
fn capacity_one_evicts() {
    let fx = fixture(1, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        let a = pool.fix(&ctx, 1, Intent::Read).await.unwrap();
        pool.unfix(1, false).unwrap();
        let b = pool.fix(&ctx, 2, Intent::Read).await.unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(pool.with_page(&b, |p| p[0]), 2);
        let s = pool.stats();
        assert_eq!((s.reads, s.writes, s.evictions), (2, 0, 1));
        pool.unfix(2, true).unwrap();
        pool.fix(&ctx, 3, Intent::Read).await.unwrap();
        assert_eq!(pool.stats().writes, 1);
    });
}

#[test]
fn all_pinned_exhausts() {
    let fx = fixture(4, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        for p in 0..4 {
            pool.fix(&ctx, p, Intent::Read).await.unwrap();
        }
        assert!(matches!(
            pool.fix(&ctx, 5, Intent::Read).await,
            Err(PoolError::PoolExhausted)
        ));
    });
}

#[test]
fn unfix_rules() {
    let fx = fixture(4, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        let a = pool.fix(&ctx, 0, Intent::Write).await.unwrap();
        pool.unfix(0, true).unwrap();
        let m = pool.core_snapshot().frames[a.frame];
        assert!(m.dirty);
        assert_eq!(m.pin, 0);
        assert!(matches!(pool.unfix(6, false), Err(PoolError::NotFixed(6))));
        assert!(matches!(pool.unfix(0, false), Err(PoolError::NotFixed(0))));
        pool.fix(&ctx, 0, Intent::Read).await.unwrap();
        pool.unfix(0, false).unwrap();
        assert!(pool.core_snapshot().frames[a.frame].dirty);
    });
}

#[test]
fn clean_eviction_issues_no_writes() {
    let fx = fixture(4, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        for p in 0..4 {
            pool.fix(&ctx, p, Intent::Read).await.unwrap();
            pool.unfix(p, false).unwrap();
        }
        let before = pool.core_snapshot();
        assert_eq!(pool.evict_batch(&ctx, 0).await.unwrap(), 0);
        assert_eq!(pool.core_snapshot(), before);
        assert_eq!(pool.evict_batch(&ctx, 2).await.unwrap(), 2);
        assert_eq!(pool.stats().writes, 0);
        pool.check_invariants().unwrap();
    });
}

#[test]
fn flush_all_counts() {
    let fx = fixture(4, 8);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        assert_eq!(pool.flush_all(&ctx).await.unwrap(), 0);
        for p in 0..3 {
            let r = pool.fix(&ctx, p, Intent::Write).await.unwrap();
            pool.with_page_mut(&r, |b| b[0] = 0x40 + p as u8);
            pool.unfix(p, true).unwrap();
        }
        pool.fix(&ctx, 3, Intent::Read).await.unwrap();
        assert!(matches!(pool.flush_all(&ctx).await, Err(PoolError::PinnedRemain(1))));
        pool.unfix(3, false).unwrap();
        assert_eq!(pool.flush_all(&ctx).await.unwrap(), 3);
        assert_eq!(pool.flush_all(&ctx).await.unwrap(), 0);
    });
    let mut buf = vec![0u8; 4096];
    use std::os::unix::fs::FileExt;
    fx.pool.store().file().file().read_exact_at(&mut buf, 2 * 4096).unwrap();
    assert_eq!(buf[0], 0x41);
}

#[test]
fn fix_past_end_is_invalid() {
    let fx = fixture(2, 2);
    let pool = fx.pool.clone();
    run_one(move |ctx| async move {
        assert!(matches!(pool.fix(&ctx, 2, Intent::Read).await, Err(PoolError::InvalidPage(2))));
        let r = pool.fix_new(&ctx).await.unwrap();
        assert_eq!(r.pid, 2);
        assert!(pool.with_page(&r, |p| p.iter().all(|&b| b == 0)));
    });
}

#[test]
fn concurrent_fibers_share_a_load() {
    let fx = fixture(8, 16);
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default())).unwrap();
    let mut s = Scheduler::new(ring, SchedConfig::default());
    for _ in 0..4 {
        let pool = fx.pool.clone();
        s.spawn(move |ctx| async move {
            let r = pool.fix(&ctx, 5, Intent::Read).await.unwrap();
            assert!(r.suspended);
            assert_eq!(pool.with_page(&r, |p| p[0]), 5);
            pool.unfix(5, false).unwrap();
        })
        .unwrap();
    }
    s.run(Until::AllFinished).unwrap();
    assert_eq!(fx.pool.stats().reads, 1);
    assert_eq!(fx.pool.stats().hits, 3);
}

#[test]
fn many_fibers_under_pressure_keep_invariants() {
    let fx = fixture(16, 64);
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default())).unwrap();
    let mut s = Scheduler::new(ring, SchedConfig::default());
    for i in 0..12u64 {
        let pool = fx.pool.clone();
        s.spawn(move |ctx| async move {
            for k in 0..50u64 {
                let pid = (i * 7 + k * 13) % 64;
                let r = pool.fix(&ctx, pid, Intent::Write).await.unwrap();
                assert_eq!(pool.with_page(&r, |p| p[0]), pid as u8);
                pool.unfix(pid, k % 3 == 0).unwrap();
                pool.check_invariants().unwrap();
            }
        })
        .unwrap();
    }
    s.run(Until::AllFinished).unwrap();
    fx.pool.check_invariants().unwrap();
}

#[test]
fn fix_during_eviction_resumes_after_it() {
    let fx = fixture(2, 4);
    let pool = fx.pool.clone();
    let p = pool.clone();
    run_one(move |ctx| async move {
        for pid in [0, 1] {
            p.fix(&ctx, pid, Intent::Write).await.unwrap();
            p.unfix(pid, true).unwrap();
        }
    });
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default())).unwrap();
    let mut s = Scheduler::new(ring, SchedConfig::default());
    let (a, b) = (pool.clone(), pool.clone());
    s.spawn(move |ctx| async move {
        assert_eq!(a.evict_batch(&ctx, 2).await.unwrap(), 2);
    })
    .unwrap();
    s.spawn(move |ctx| async move {
        // Page 0 is being written back when this probe runs.
        let r = b.fix(&ctx, 0, Intent::Read).await.unwrap();
        assert!(r.missed && r.suspended);
        assert_eq!(b.with_page(&r, |p| p[0]), 0);
        b.unfix(0, false).unwrap();
    })
    .unwrap();
    s.run(Until::AllFinished).unwrap();
    assert_eq!(pool.stats().writes, 2);
    pool.check_invariants().unwrap();
}
