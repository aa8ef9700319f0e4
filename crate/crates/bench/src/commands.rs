//! Row producers for the engine, model and shuffle commands.

use std::path::PathBuf;
use std::time::Duration;

use uring_engine::perfmodel::{self, CalibrationConfig, CostProfile};
use uring_engine::rt::SimDeviceConfig;
use uring_engine::workload::{self, RunMetrics, Target, Variant, WorkloadConfig, WorkloadError};
use uring_shuffle::ShuffleReport;

use crate::error::{BenchError, Result};
use crate::rows::Rows;

/// Database location plus the optional simulated device.
#[derive(Debug, Clone)]
pub struct YcsbTarget {
    pub path: PathBuf,
    pub direct: bool,
    pub sim: Option<SimDeviceConfig>,
}

impl YcsbTarget {
    fn target(&self) -> Target {
        match &self.sim {
            Some(sim) => Target::simulated(&self.path, sim.clone()),
            None => Target::file(&self.path, self.direct),
        }
    }
}

pub fn ycsb_load(cfg: &WorkloadConfig, t: &YcsbTarget, rows: &mut Rows) -> Result<()> {
    let started = std::time::Instant::now();
    let db = workload::load(cfg, &t.target())?;
    let param = format!("tuples={}", cfg.tuples);
    rows.num("ycsb-load", "bulk", &param, "pages", db.header.page_count as f64);
    rows.num("ycsb-load", "bulk", &param, "wall_time", started.elapsed().as_secs_f64());
    Ok(())
}

pub fn metrics_rows(rows: &mut Rows, param: &str, m: &RunMetrics) {
    let v = m.variant.as_str();
    rows.num("ycsb", v, param, "tps", m.tps);
    rows.num("ycsb", v, param, "page_fault_rate", m.page_fault_rate);
    rows.num("ycsb", v, param, "reads_issued", m.reads_issued as f64);
    rows.num("ycsb", v, param, "writes_issued", m.writes_issued as f64);
    rows.num("ycsb", v, param, "mean_batch", m.mean_batch);
    rows.num("ycsb", v, param, "wall_time", m.wall_time);
    rows.num("ycsb", v, param, "tx", m.tx as f64);
}

/// Runs each variant in turn; unsupported ones become skipped rows.
pub fn ycsb_run(cfg: &WorkloadConfig, variants: &[Variant], t: &YcsbTarget, rows: &mut Rows) -> Result<Vec<RunMetrics>> {
    let param = format!("fibers={}", cfg.fibers);
    let mut out = Vec::new();
    for &v in variants {
        match workload::run(cfg, v, &t.target()) {
            Ok(m) => {
                metrics_rows(rows, &param, &m);
                out.push(m);
            }
            Err(e @ WorkloadError::VariantUnsupported { .. }) => {
                log::warn!("{e}");
                rows.skip("ycsb", v.name(), &param, "tps", e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn us(x: f64) -> String {
    format!("{x} µs")
}

pub fn predict_latency(r_pf: f64, l_read_us: f64, l_write_us: f64, writes_amortized: bool, rows: &mut Rows) -> Result<String> {
    if !(r_pf.is_finite() && (0.0..=1.0).contains(&r_pf)) || !(l_read_us >= 0.0) || !(l_write_us >= 0.0) {
        return Err(BenchError::Config("r_pf must lie in [0, 1] and latencies must be non-negative".into()));
    }
    let p = perfmodel::predict_latency_bound(r_pf, l_read_us, l_write_us, writes_amortized);
    let formula = if writes_amortized {
        format!("1 / ({r_pf} × {})", us(l_read_us))
    } else {
        format!("1 / ({r_pf} × ({} + {}))", us(l_read_us), us(l_write_us))
    };
    let variant = if writes_amortized { "latency-bound-amortized" } else { "latency-bound" };
    if p.division_domain {
        rows.skip("predict", variant, &formula, "tps", "division domain: no latency on the critical path");
        return Ok(format!("{formula} = +inf (no latency on the critical path)"));
    }
    rows.num("predict", variant, &formula, "tps", p.tps);
    Ok(format!("{formula} = {:.0} tx/s", p.tps))
}

pub fn predict_cycles(clock_hz: f64, c_tx: f64, r_pf: f64, c_io: f64, rows: &mut Rows) -> Result<String> {
    let tps = perfmodel::predict_cycle_bound(clock_hz, c_tx, r_pf, c_io).map_err(|e| BenchError::Config(e.to_string()))?;
    let formula = format!("{clock_hz} Hz / ({c_tx} + {r_pf} × {c_io})");
    rows.num("predict", "cycle-bound", &formula, "tps", tps);
    Ok(format!("{formula} = {tps:.0} tx/s"))
}

pub fn calibrate_rows(cfg: &CalibrationConfig, rows: &mut Rows) -> Result<CostProfile> {
    let p = perfmodel::calibrate(cfg, None).map_err(|e| BenchError::BackendFailure(e.to_string()))?;
    let variant = if cfg.sim.is_some() { "simulated" } else { "host" };
    for (metric, v) in [
        ("l_read_us", p.l_read_us),
        ("l_write_us", p.l_write_us),
        ("c_tx", p.c_tx),
        ("c_read_single", p.c_read_single),
        ("c_read_batch", p.c_read_batch),
        ("c_write_batch", p.c_write_batch),
        ("clock_hz", p.clock_hz),
        ("r_pf", p.r_pf),
    ] {
        rows.num("calibrate", variant, "profile", metric, v);
    }
    Ok(p)
}

pub fn shuffle_rows(r: &ShuffleReport, rows: &mut Rows) {
    let variant = format!(
        "{}{}{}{}{}",
        r.backend,
        if r.zero_copy_send { "+zc-send" } else { "" },
        if r.zero_copy_recv { "+zc-recv" } else { "" },
        if r.multishot_recv { "+multishot" } else { "" },
        if r.poll_first { "+poll-first" } else { "" },
    );
    let param = format!("node={}/{},width={}", r.node_id, r.nodes, r.tuple_width);
    rows.num("shuffle", &variant, &param, "runtime_s", r.runtime.as_secs_f64());
    rows.num("shuffle", &variant, &param, "egress_gib_per_s", r.egress_gib_per_s());
    rows.num("shuffle", &variant, &param, "egress_bytes", r.egress_total() as f64);
    rows.num("shuffle", &variant, &param, "ingress_bytes", r.ingress_total() as f64);
    rows.num("shuffle", &variant, &param, "tuples_received", r.tuples_received as f64);
    rows.num("shuffle", &variant, &param, "partition_checksum", r.partition_checksum.sum as f64);
}

/// A simulated device with the given latencies in microseconds.
pub fn sim_device(read_us: u64, write_us: u64) -> SimDeviceConfig {
    SimDeviceConfig {
        read_latency: Duration::from_micros(read_us),
        write_latency: Duration::from_micros(write_us),
        flush_latency: Duration::from_micros(write_us),
        ..SimDeviceConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_print_their_formula() {
        let mut rows = Rows::new("h".into());
        let s = predict_latency(0.7, 70.0, 12.0, false, &mut rows).unwrap();
        assert_eq!(s, "1 / (0.7 × (70 µs + 12 µs)) = 17422 tx/s");
        let s = predict_cycles(3.7e9, 8264.0, 0.7, 15900.0, &mut rows).unwrap();
        assert_eq!(s, "3700000000 Hz / (8264 + 0.7 × 15900) = 190781 tx/s");
        let s = predict_latency(0.0, 70.0, 12.0, false, &mut rows).unwrap();
        assert!(s.contains("+inf"));
        assert_eq!(rows.rows.len(), 3);
        assert!(rows.rows[2].value.num().is_none());
        assert!(predict_latency(1.5, 70.0, 12.0, false, &mut rows).is_err());
        assert!(predict_cycles(3.7e9, 0.0, 0.0, 0.0, &mut rows).is_err());
    }

    #[test]
    fn unsupported_variants_are_skipped_and_others_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorkloadConfig {
            tuples: 2000,
            ops: workload::RunLength::Ops(500),
            fibers: 4,
            pool_bytes: 32 * 4096,
            ..WorkloadConfig::default()
        };
        let t = YcsbTarget {
            path: dir.path().join("db"),
            direct: false,
            sim: Some(SimDeviceConfig::default()),
        };
        let mut rows = Rows::new("h".into());
        ycsb_load(&cfg, &t, &mut rows).unwrap();
        let ms = ycsb_run(&cfg, &[Variant::UringSync, Variant::Passthru, Variant::Fibers], &t, &mut rows).unwrap();
        assert_eq!(ms.len(), 2);
        assert!(rows.find("ycsb", "+passthru", "fibers=4", "tps").unwrap().value.num().is_none());
        assert!(rows.find("ycsb", "+fibers", "fibers=4", "tps").unwrap().value.num().unwrap() > 0.0);
    }
}
