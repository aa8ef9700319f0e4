//! Properties of the adaptive submission policy and the fiber scheduler.

#![allow(dead_code)]

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uring_engine::fiber::{flush_threshold, SchedConfig, Scheduler, Until};
use uring_engine::rt::{Buf, IoRequest, RingConfig, RingHandle, SimDeviceConfig, StorageFile};

/// Counts random `(queued, inflight, runnable)` triples whose threshold
/// falls outside `[1, max_batch]` or whose flush decision disagrees with
/// the reference rule.
pub fn threshold_violations(samples: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..samples {
        let max_batch = rng.gen_range(1..=256usize);
        let inflight = rng.gen_range(0..100_000usize);
        let runnable = rng.gen_range(0..2_000usize);
        let queued = rng.gen_range(0..512usize);
        let t = flush_threshold(inflight, runnable, max_batch);
        let reference = std::cmp::min(std::cmp::max(inflight / runnable.max(1), 1), max_batch);
        let flush = uring_engine::fiber::adaptive_flush_decision(queued, inflight, runnable, max_batch);
        if !(1..=max_batch).contains(&t) || t != reference || flush != (runnable == 0 || queued >= t) {
            bad += 1;
        }
    }
    bad
}

/// Runs random programs of I/O and yields on `fibers` fibers. Returns the
/// number of fibers that did not finish or saw a completion meant for
/// someone else.
pub fn starvation_trace(seed: u64) -> usize {
    let mut t = tempfile::NamedTempFile::new().unwrap();
    t.write_all(&vec![3u8; 1 << 16]).unwrap();
    let desc = StorageFile::open(t.path(), false, false).unwrap().desc();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default()).depth(256)).unwrap();
    let mut s = Scheduler::new(
        ring,
        SchedConfig {
            max_batch: rng.gen_range(1..16),
            ..SchedConfig::default()
        },
    );
    let fibers = rng.gen_range(1..64);
    let finished = Rc::new(RefCell::new(vec![false; fibers]));
    for id in 0..fibers {
        let steps: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..3)).collect();
        let finished = finished.clone();
        s.spawn(move |ctx| async move {
            let mut ok = true;
            for (k, step) in steps.into_iter().enumerate() {
                let tag = ((id as u64) << 32) | k as u64;
                let mut buf = vec![0u8; 512];
                let b = Buf::from_slice(&mut buf);
                let req = match step {
                    0 => IoRequest::read(desc, 0, b),
                    1 => IoRequest::write(desc, 8192, b),
                    _ => {
                        ctx.yield_now().await;
                        continue;
                    }
                };
                // SAFETY: `buf` outlives the awaited request.
                let c = unsafe { ctx.io(req.tag(tag)) }.await.unwrap();
                ok &= c.tag == tag;
            }
            finished.borrow_mut()[id] = ok;
        })
        .unwrap();
    }
    if s.run(Until::AllFinished).is_err() {
        return fibers;
    }
    let done = finished.borrow().iter().filter(|&&f| f).count();
    fibers - done
}
