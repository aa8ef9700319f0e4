use std::fmt;
use std::str::FromStr;

use super::error::{Result, RtError};
use super::sim::SimDeviceConfig;

/// Execution backend behind a [`super::RingHandle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    /// Kernel ring, interrupt driven completions, submission via `io_uring_enter`.
    UringDefault,
    /// Kernel ring with a submission-polling kernel thread.
    UringSqpoll,
    /// Kernel ring with completion polling on the device queue (direct I/O only).
    UringIopoll,
    /// Kernel ring with 128-byte entries issuing native NVMe commands.
    UringPassthrough,
    /// Blocking `pread`/`pwrite`/`send`/`recv` executed at submit time.
    PosixSync,
    /// Deterministic virtual-time device.
    Simulated,
}

impl Backend {
    pub const ALL: [Backend; 6] = [
        Backend::UringDefault,
        Backend::UringSqpoll,
        Backend::UringIopoll,
        Backend::UringPassthrough,
        Backend::PosixSync,
        Backend::Simulated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backend::UringDefault => "uring-default",
            Backend::UringSqpoll => "uring-sqpoll",
            Backend::UringIopoll => "uring-iopoll",
            Backend::UringPassthrough => "uring-passthrough",
            Backend::PosixSync => "posix-sync",
            Backend::Simulated => "simulated",
        }
    }

    pub fn is_uring(self) -> bool {
        matches!(
            self,
            Backend::UringDefault
                | Backend::UringSqpoll
                | Backend::UringIopoll
                | Backend::UringPassthrough
        )
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Backend::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown backend `{s}`"))
    }
}

/// Ring setup parameters.
///
/// The default is a kernel ring with deferred task running and the
/// single-issuer contract; polling modes are opt-in.
#[derive(Debug, Clone)]
pub struct RingConfig {
    pub backend: Backend,
    pub sq_depth: u32,
    /// `None` selects twice the submission depth.
    pub cq_depth: Option<u32>,
    pub defer_taskrun: bool,
    pub coop_taskrun: bool,
    pub single_issuer: bool,
    pub sqpoll_idle_ms: u32,
    /// NAPI busy-poll budget, 0 disables.
    pub napi_busy_poll_us: u32,
    /// Force every request onto the kernel's async worker threads.
    pub force_async_workers: bool,
    /// 128-byte submission entries so NVMe commands can be issued; implied
    /// by [`Backend::UringPassthrough`].
    pub nvme_passthrough: bool,
    /// Completion polling on top of the selected backend; implied by
    /// [`Backend::UringIopoll`].
    pub iopoll: bool,
    /// Device model for [`Backend::Simulated`].
    pub sim: SimDeviceConfig,
}

pub const MAX_DEPTH: u32 = 32768;

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            backend: Backend::UringDefault,
            sq_depth: 256,
            cq_depth: None,
            defer_taskrun: true,
            coop_taskrun: false,
            single_issuer: true,
            sqpoll_idle_ms: 1000,
            napi_busy_poll_us: 0,
            force_async_workers: false,
            nvme_passthrough: false,
            iopoll: false,
            sim: SimDeviceConfig::default(),
        }
    }
}

impl RingConfig {
    pub fn simulated(sim: SimDeviceConfig) -> Self {
        RingConfig {
            backend: Backend::Simulated,
            sim,
            ..RingConfig::default()
        }
    }

    pub fn with_backend(backend: Backend) -> Self {
        let mut cfg = RingConfig {
            backend,
            ..RingConfig::default()
        };
        if backend == Backend::UringSqpoll {
            // DeferTR requires the submitting task to run task work, which
            // the polling thread cannot do on the application's behalf.
            cfg.defer_taskrun = false;
        }
        cfg
    }

    pub fn depth(mut self, sq_depth: u32) -> Self {
        self.sq_depth = sq_depth;
        self
    }

    /// Checks flag invariants and rounds depths up to powers of two.
    pub fn normalized(&self) -> Result<RingConfig> {
        let mut cfg = self.clone();
        if cfg.sq_depth == 0 || cfg.sq_depth > MAX_DEPTH {
            return Err(RtError::InvalidDepth(cfg.sq_depth));
        }
        cfg.sq_depth = cfg.sq_depth.next_power_of_two();
        let cq = cfg.cq_depth.unwrap_or(cfg.sq_depth * 2);
        if cq < cfg.sq_depth || cq > 2 * MAX_DEPTH {
            return Err(RtError::InvalidDepth(cq));
        }
        cfg.cq_depth = Some(cq.next_power_of_two());

        if cfg.defer_taskrun && cfg.coop_taskrun {
            return Err(RtError::IncompatibleFlags(
                "defer_taskrun and coop_taskrun are mutually exclusive",
            ));
        }
        if cfg.defer_taskrun && !cfg.single_issuer {
            return Err(RtError::IncompatibleFlags(
                "defer_taskrun requires single_issuer",
            ));
        }
        if cfg.defer_taskrun && cfg.backend == Backend::UringSqpoll {
            return Err(RtError::IncompatibleFlags(
                "defer_taskrun cannot be combined with a submission-polling thread",
            ));
        }
        Ok(cfg)
    }

    pub fn cq_entries(&self) -> u32 {
        self.cq_depth.unwrap_or(self.sq_depth * 2)
    }
}
