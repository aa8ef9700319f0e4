//! Cycle counting for cost measurements.
//!
//! Uses the invariant TSC where the CPU advertises one, otherwise the
//! monotonic nanosecond clock scaled by a nominal frequency. The chosen
//! source is reported so result rows can record it.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleSource {
    Tsc,
    NanosScaled,
}

impl CycleSource {
    pub fn name(self) -> &'static str {
        match self {
            CycleSource::Tsc => "tsc",
            CycleSource::NanosScaled => "ns-scaled",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CycleClock {
    pub source: CycleSource,
    /// Counter ticks per second.
    pub hz: f64,
}

const NOMINAL_HZ: f64 = 3.0e9;

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

#[cfg(target_arch = "x86_64")]
fn has_invariant_tsc() -> bool {
    use std::arch::x86_64::__cpuid;
    // SAFETY: cpuid is available on every x86_64 CPU.
    let max_ext = __cpuid(0x8000_0000).eax;
    if max_ext < 0x8000_0007 {
        return false;
    }
    let edx = __cpuid(0x8000_0007).edx;
    edx & (1 << 8) != 0
}

#[cfg(not(target_arch = "x86_64"))]
fn has_invariant_tsc() -> bool {
    false
}

/// Raw counter value in ticks of [`clock()`].
#[inline]
pub fn now() -> u64 {
    match clock().source {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: rdtsc has no preconditions.
        CycleSource::Tsc => unsafe { std::arch::x86_64::_rdtsc() },
        _ => {
            let ns = epoch().elapsed().as_nanos() as f64;
            (ns * NOMINAL_HZ / 1e9) as u64
        }
    }
}

pub fn clock() -> CycleClock {
    static CLOCK: OnceLock<CycleClock> = OnceLock::new();
    *CLOCK.get_or_init(|| {
        if has_invariant_tsc() {
            CycleClock {
                source: CycleSource::Tsc,
                hz: calibrate_tsc(),
            }
        } else {
            CycleClock {
                source: CycleSource::NanosScaled,
                hz: NOMINAL_HZ,
            }
        }
    })
}

#[cfg(target_arch = "x86_64")]
fn calibrate_tsc() -> f64 {
    let t0 = Instant::now();
    // SAFETY: see `now`.
    let c0 = unsafe { std::arch::x86_64::_rdtsc() };
    while t0.elapsed() < Duration::from_millis(20) {
        std::hint::spin_loop();
    }
    let c1 = unsafe { std::arch::x86_64::_rdtsc() };
    let secs = t0.elapsed().as_secs_f64();
    (c1 - c0) as f64 / secs
}

#[cfg(not(target_arch = "x86_64"))]
fn calibrate_tsc() -> f64 {
    NOMINAL_HZ
}

pub fn to_duration(cycles: u64) -> Duration {
    Duration::from_secs_f64(cycles as f64 / clock().hz)
}

/// Burns roughly `cycles` counter ticks. Stand-in for compute-heavy transaction logic.
pub fn spin(cycles: u64) {
    if cycles == 0 {
        return;
    }
    let start = now();
    while now().wrapping_sub(start) < cycles {
        std::hint::spin_loop();
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 0 {
        (samples[mid - 1] + samples[mid]) / 2.0
    } else {
        samples[mid]
    }
}
