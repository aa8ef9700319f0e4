//! Cost of submitting and reaping no-op requests in batches.

use uring_engine::cycles;
use uring_engine::rt::{IoCompletion, IoRequest, RingConfig, RingHandle};

use crate::error::Result;
use crate::rows::Rows;

#[derive(Debug, Clone)]
pub struct NopConfig {
    pub batch_sizes: Vec<usize>,
    /// Requests per batch size.
    pub iterations: u64,
    pub ring: RingConfig,
}

impl Default for NopConfig {
    fn default() -> Self {
        NopConfig {
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128],
            iterations: 1_000_000,
            ring: RingConfig::default(),
        }
    }
}

/// Median cycles per request of one batch size.
pub fn cycles_per_op(ring: &mut RingHandle, batch: usize, iterations: u64) -> Result<f64> {
    let rounds = (iterations / batch as u64).max(1);
    let mut samples = Vec::with_capacity(rounds as usize);
    let mut done: Vec<IoCompletion> = Vec::with_capacity(batch);
    // Warm the ring and the counters before timing.
    for r in 0..rounds.min(64) + rounds {
        let t0 = cycles::now();
        for i in 0..batch {
            // SAFETY: a no-op references no memory.
            unsafe { ring.enqueue(IoRequest::nop().tag(i as u64)) }?;
        }
        ring.submit()?;
        done.clear();
        ring.reap_into(&mut done, batch, batch, None)?;
        let t1 = cycles::now();
        if r >= rounds.min(64) {
            samples.push(t1.saturating_sub(t0) as f64 / batch as f64);
        }
    }
    Ok(cycles::median(&mut samples))
}

pub fn bench_nop(cfg: &NopConfig, rows: &mut Rows) -> Result<()> {
    if cfg.batch_sizes.is_empty() {
        return Ok(());
    }
    let max = *cfg.batch_sizes.iter().max().unwrap_or(&1);
    let variant = cfg.ring.backend.name();
    let mut ring = match RingHandle::new(&cfg.ring.clone().depth(max.max(1) as u32)) {
        Ok(r) => r,
        Err(e) if crate::util::is_unsupported(&e) => {
            for &b in &cfg.batch_sizes {
                rows.skip("nop", variant, b, "cycles_per_op", format!("ring unavailable: {e}"));
            }
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    for &b in &cfg.batch_sizes {
        if b == 0 {
            return Err(crate::BenchError::Config("batch size 0".into()));
        }
        let c = cycles_per_op(&mut ring, b, cfg.iterations)?;
        rows.num("nop", variant, b, "cycles_per_op", c);
    }
    Ok(())
}
