use std::collections::BTreeMap;

use super::*;
use crate::rt::SimCpuModel;

fn small(tuples: u64) -> WorkloadConfig {
    WorkloadConfig {
        tuples,
        ops: RunLength::Ops(2_000),
        fibers: 8,
        pool_bytes: 64 * 4096,
        seed: 7,
        ..WorkloadConfig::default()
    }
}

fn loaded(cfg: &WorkloadConfig) -> (tempfile::TempDir, Target) {
    let dir = tempfile::tempdir().unwrap();
    let target = Target::simulated(dir.path().join("db"), SimDeviceConfig::default());
    load(cfg, &target).unwrap();
    (dir, target)
}

fn with_sim(target: &Target, sim: SimDeviceConfig) -> Target {
    Target::simulated(target.path.clone(), sim)
}

fn fresh_sim(target: &Target) -> Target {
    with_sim(target, SimDeviceConfig::default())
}

#[test]
fn load_page_count_follows_fanout() {
    let cfg = small(1000);
    let dir = tempfile::tempdir().unwrap();
    let files = load(&cfg, &Target::simulated(dir.path().join("db"), SimDeviceConfig::default())).unwrap();
    // 30 entries of 136 bytes per leaf; one inner node covers all 34 leaves.
    let leaves = 1000u64.div_ceil((4096 - 16) / 136);
    assert_eq!(leaves, 34);
    assert_eq!(files.header.page_count, leaves + 1);
    assert_eq!(files.header.height, 2);
    assert_eq!(files.header.tuples, 1000);
    let len = std::fs::metadata(&files.path).unwrap().len();
    assert_eq!(len, (files.header.page_count + 1) * 4096);
}

#[test]
fn reload_is_byte_identical() {
    let cfg = small(5000);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    load(&cfg, &Target::file(&a, false)).unwrap();
    load(&cfg, &Target::file(&b, false)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = WorkloadConfig { seed: 8, ..cfg };
    load(&other, &Target::file(&b, false)).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let t = Target::file(dir.path().join("db"), false);
    let zero = WorkloadConfig {
        value_width: 0,
        ..small(10)
    };
    assert!(matches!(load(&zero, &t), Err(WorkloadError::Config(_))));
    for bad in [
        WorkloadConfig {
            update_fraction: 1.5,
            ..small(10)
        },
        WorkloadConfig {
            page_size: 1000,
            ..small(10)
        },
        WorkloadConfig {
            page_size: 256,
            ..small(10)
        },
        WorkloadConfig {
            value_width: 4000,
            ..small(10)
        },
    ] {
        assert!(matches!(bad.validate(), Err(WorkloadError::Config(_))), "{bad:?}");
    }
}

#[test]
fn zero_ops_is_empty() {
    let cfg = WorkloadConfig {
        ops: RunLength::Ops(0),
        ..small(1000)
    };
    let (_d, t) = loaded(&cfg);
    let m = run(&cfg, Variant::BatchSubmit, &t).unwrap();
    assert_eq!(m.tx, 0);
    assert_eq!(m.tps, 0.0);
    assert_eq!(m.reads_issued + m.writes_issued, 0);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(v.name().trim_start_matches('+').parse::<Variant>().unwrap(), v);
    }
    assert!("turbo".parse::<Variant>().is_err());
    assert!(Variant::PosixSync < Variant::Sqpoll);
    assert_eq!(Variant::UringSync.evict_batch(), 1);
    assert_eq!(Variant::BatchEvict.evict_batch(), 8);
    assert_eq!(Variant::BatchEvict.fibers(128), 1);
    assert_eq!(Variant::Fibers.fibers(128), 128);
    assert_eq!(Variant::Fibers.max_batch(), 1);
    assert_eq!(Variant::BatchSubmit.max_batch(), 32);
}

#[test]
fn simulator_rejects_device_rungs() {
    let cfg = small(1000);
    let (_d, t) = loaded(&cfg);
    for v in [Variant::Passthru, Variant::Iopoll, Variant::Sqpoll] {
        assert!(matches!(run(&cfg, v, &t), Err(WorkloadError::VariantUnsupported { .. })));
    }
}

#[test]
fn file_without_nvme_rejects_passthru() {
    let cfg = small(1000);
    let dir = tempfile::tempdir().unwrap();
    let t = Target::file(dir.path().join("db"), false);
    load(&cfg, &t).unwrap();
    assert!(matches!(
        run(&cfg, Variant::Passthru, &t),
        Err(WorkloadError::VariantUnsupported { .. })
    ));
}

#[test]
fn cached_database_stops_faulting() {
    let cfg = WorkloadConfig {
        pool_bytes: 200 * 4096,
        ..small(3000)
    };
    let (_d, t) = loaded(&cfg);
    let m = run(&cfg, Variant::BatchSubmit, &t).unwrap();
    assert!(m.warmup_tx > 0);
    assert_eq!(m.page_fault_rate, 0.0);
    assert_eq!(m.reads_issued, 0);
    assert_eq!(m.writes_issued, 0);
}

#[test]
fn same_seed_same_metrics() {
    let cfg = small(20_000);
    let (_d, t) = loaded(&cfg);
    let a = run(&cfg, Variant::BatchSubmit, &fresh_sim(&t)).unwrap();
    // Reload so the second run starts from the same file contents.
    load(&cfg, &t).unwrap();
    let b = run(&cfg, Variant::BatchSubmit, &fresh_sim(&t)).unwrap();
    assert_eq!(a, RunMetrics { cpu_time: a.cpu_time, ..b.clone() });
    assert!(a.tx >= 2_000);
    assert!(a.reads_issued > 0);
}

#[test]
fn reads_track_fault_rate() {
    let cfg = WorkloadConfig {
        ops: RunLength::Ops(20_000),
        fibers: 1,
        ..small(30_000)
    };
    let cfg = WorkloadConfig {
        pool_bytes: cfg.pool_bytes_for_fault_rate(0.5),
        ..cfg
    };
    let (_d, t) = loaded(&cfg);
    let m = run(&cfg, Variant::UringSync, &t).unwrap();
    // Inner pages stay resident, so a faulting transaction reads one leaf.
    let expected = m.page_fault_rate * m.tx as f64;
    let rel = (m.reads_issued as f64 - expected).abs() / expected;
    assert!(rel < 0.05, "reads {} vs {expected}", m.reads_issued);
    assert!((m.page_fault_rate - 0.5).abs() < 0.05, "{}", m.page_fault_rate);
    // Leaves are dirty by the time they are evicted; only the odd inner page is clean.
    assert!(m.writes_issued <= m.reads_issued, "{m:?}");
    assert!(m.writes_issued as f64 >= 0.99 * m.reads_issued as f64, "{m:?}");
}

/// Replays each fiber's prefix of the operation stream against a map.
fn oracle(cfg: &WorkloadConfig, tx_per_fiber: &[u64]) -> BTreeMap<u64, Vec<u8>> {
    let mut map: BTreeMap<u64, Vec<u8>> = initial_values(cfg.seed, cfg.tuples, cfg.value_width).collect();
    for (i, &n) in tx_per_fiber.iter().enumerate() {
        for op in OpStream::new(cfg, i).take(n as usize) {
            if op.update {
                bump(map.get_mut(&op.key).unwrap());
            }
        }
    }
    map
}

fn contents(cfg: &WorkloadConfig, path: &Path) -> BTreeMap<u64, Vec<u8>> {
    let store = PageStore::new(StorageFile::open(path, false, false).unwrap(), cfg.page_size);
    let header = store.read_header().unwrap();
    let pool = Rc::new(BufferPool::new(PoolConfig::with_frames(32), store, header.page_count));
    let tree = BTree::open(pool, &header).unwrap();
    let ring = RingHandle::new(&RingConfig::simulated(SimDeviceConfig::default())).unwrap();
    let mut sched = Scheduler::new(ring, SchedConfig::default());
    let out = Rc::new(RefCell::new(BTreeMap::new()));
    let sink = out.clone();
    sched
        .spawn(move |ctx| async move {
            tree.scan(&ctx, |k, v| {
                sink.borrow_mut().insert(k, v.to_vec());
            })
            .await
            .unwrap();
        })
        .unwrap();
    sched.run(Until::AllFinished).unwrap();
    Rc::try_unwrap(out).unwrap().into_inner()
}

#[test]
fn final_contents_match_operation_stream() {
    for (variant, fibers, update_fraction) in [
        (Variant::UringSync, 1, 1.0),
        (Variant::BatchSubmit, 16, 0.5),
        (Variant::RegBufs, 8, 1.0),
    ] {
        let cfg = WorkloadConfig {
            fibers,
            update_fraction,
            value_width: 24,
            ..small(8_000)
        };
        let (_d, t) = loaded(&cfg);
        let m = run(&cfg, variant, &t).unwrap();
        assert_eq!(m.tx_per_fiber.len(), fibers);
        assert_eq!(m.tx_per_fiber.iter().sum::<u64>(), m.tx + m.warmup_tx);
        assert_eq!(contents(&cfg, &t.path), oracle(&cfg, &m.tx_per_fiber), "{variant}");
    }
}

#[test]
fn kernel_ring_runs_match_operation_stream() {
    let cfg = WorkloadConfig {
        fibers: 8,
        value_width: 40,
        ..small(6_000)
    };
    let dir = tempfile::tempdir().unwrap();
    let t = Target::file(dir.path().join("db"), false);
    load(&cfg, &t).unwrap();
    for v in [Variant::PosixSync, Variant::UringSync, Variant::BatchSubmit, Variant::RegBufs] {
        let before = contents(&cfg, &t.path);
        let m = run(&cfg, v, &t).unwrap_or_else(|e| panic!("{v}: {e}"));
        assert!(m.tx >= 2_000, "{v}");
        let mut want = before;
        for (i, &n) in m.tx_per_fiber.iter().enumerate() {
            for op in OpStream::new(&cfg, i).take(n as usize).filter(|o| o.update) {
                bump(want.get_mut(&op.key).unwrap());
            }
        }
        assert_eq!(contents(&cfg, &t.path), want, "{v}");
    }
}

#[test]
fn cpu_model_charges_compute() {
    let cfg = WorkloadConfig {
        pool_bytes: 400 * 4096,
        compute_cycles_per_tx: 37_000,
        ..small(3000)
    };
    let (_d, t) = loaded(&cfg);
    let sim = SimDeviceConfig {
        cpu: Some(SimCpuModel {
            clock_hz: 3.7e9,
            enter_cycles: 0,
            read_cycles: 0,
            write_cycles: 0,
        }),
        ..SimDeviceConfig::default()
    };
    let m = run(&cfg, Variant::BatchSubmit, &with_sim(&t, sim)).unwrap();
    // Fully cached: throughput is the compute limit of 10 us per transaction.
    assert!((m.tps - 100_000.0).abs() < 1.0, "{}", m.tps);
}

#[test]
fn bump_is_a_counter() {
    let mut v = vec![0xffu8, 0, 9];
    bump(&mut v);
    assert_eq!(v, [0, 1, 9]);
    let mut w = vec![0xffu8; 10];
    bump(&mut w);
    assert_eq!(w, [0, 0, 0, 0, 0, 0, 0, 0, 0xff, 0xff]);
}
