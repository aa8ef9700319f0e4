//! Host capability report, used by tests and benches to decide what to skip.

use std::path::PathBuf;

use uring_engine::cycles;
use uring_engine::rt::{Backend, Buf, FileDesc, IoRequest, RingConfig, RingHandle};

use crate::rows::Rows;
use crate::storage::resolve_device;

/// `Ok(())` when the feature works, else why not.
pub type Probe = Result<(), String>;

#[derive(Debug, Clone)]
pub struct Capabilities {
    pub kernel: String,
    pub cycle_source: &'static str,
    pub cycle_hz: f64,
    pub ring: Probe,
    pub defer_taskrun: Probe,
    pub sqpoll: Probe,
    pub iopoll: Probe,
    pub passthrough_ring: Probe,
    pub send_zero_copy: Probe,
    pub multishot_recv: Probe,
    pub zero_copy_recv: Probe,
    pub napi: Probe,
    pub nvme_char_devices: Vec<PathBuf>,
    pub device: Option<PathBuf>,
}

fn ring_with(cfg: RingConfig) -> Probe {
    RingHandle::new(&cfg).map(drop).map_err(|e| e.to_string())
}

fn probe_send_zc() -> Probe {
    let l = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let a = std::net::TcpStream::connect(l.local_addr().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let _b = l.accept().map_err(|e| e.to_string())?;
    let mut ring = RingHandle::new(&RingConfig::default()).map_err(|e| e.to_string())?;
    let byte = [7u8];
    let req = IoRequest::send(FileDesc::socket(&a), Buf::from_ref(&byte)).zero_copy(true);
    // SAFETY: `byte` outlives the request, which is reaped before returning.
    unsafe { ring.enqueue(req) }.map_err(|e| e.to_string())?;
    ring.submit().map_err(|e| e.to_string())?;
    let c = ring
        .reap(1, 1, Some(std::time::Duration::from_secs(5)))
        .map_err(|e| e.to_string())?;
    c[0].into_result().map(drop).map_err(|e| e.to_string())
}

fn probe_buf_ring() -> Probe {
    let mut ring = RingHandle::new(&RingConfig::default()).map_err(|e| e.to_string())?;
    ring.setup_buf_ring(1, 8, 4096).map_err(|e| e.to_string())
}

fn probe_zc_recv() -> Probe {
    // The runtime never registers an interface queue, which zero-copy receive requires.
    Err("no interface queue registered for zero-copy receive".into())
}

pub fn nvme_char_devices() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir("/dev")
        .map(|d| {
            d.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ng")))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

pub fn probe() -> Capabilities {
    let clock = cycles::clock();
    let kernel = std::fs::read_to_string("/proc/sys/kernel/osrelease")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into());
    let ring = ring_with(RingConfig::default());
    let mut napi = RingConfig::default();
    napi.napi_busy_poll_us = 50;
    Capabilities {
        kernel,
        cycle_source: clock.source.name(),
        cycle_hz: clock.hz,
        defer_taskrun: ring.clone(),
        ring: ring_with(RingConfig {
            defer_taskrun: false,
            ..RingConfig::default()
        }),
        sqpoll: ring_with(RingConfig::with_backend(Backend::UringSqpoll)),
        iopoll: ring_with(RingConfig::with_backend(Backend::UringIopoll)),
        passthrough_ring: ring_with(RingConfig::with_backend(Backend::UringPassthrough)),
        send_zero_copy: probe_send_zc(),
        multishot_recv: probe_buf_ring(),
        zero_copy_recv: probe_zc_recv(),
        napi: ring_with(napi),
        nvme_char_devices: nvme_char_devices(),
        device: resolve_device(None),
    }
}

impl Capabilities {
    pub fn to_rows(&self, rows: &mut Rows) {
        let mut feature = |name: &str, p: &Probe| match p {
            Ok(()) => rows.num("doctor", name, "ok", "supported", 1.0),
            Err(why) => rows.num("doctor", name, why, "supported", 0.0),
        };
        feature("ring", &self.ring);
        feature("defer-taskrun", &self.defer_taskrun);
        feature("sqpoll", &self.sqpoll);
        feature("iopoll", &self.iopoll);
        feature("passthrough-ring", &self.passthrough_ring);
        feature("send-zero-copy", &self.send_zero_copy);
        feature("multishot-recv", &self.multishot_recv);
        feature("zero-copy-recv", &self.zero_copy_recv);
        feature("napi", &self.napi);
        let ng = self.nvme_char_devices.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" ");
        rows.num("doctor", "nvme-char-devices", if ng.is_empty() { "none" } else { &ng }, "count", self.nvme_char_devices.len() as f64);
        let dev = self.device.as_ref().map_or("unset".into(), |p| p.display().to_string());
        rows.num("doctor", "device", &dev, "configured", f64::from(u8::from(self.device.is_some())));
        rows.num("doctor", "kernel", &self.kernel, "present", 1.0);
        rows.num("doctor", "cycle-counter", self.cycle_source, "hz", self.cycle_hz);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_has_every_feature() {
        let caps = probe();
        let mut rows = Rows::new("h".into());
        caps.to_rows(&mut rows);
        assert_eq!(rows.rows.len(), 13);
        assert!(caps.zero_copy_recv.is_err());
        assert!(rows.rows.iter().all(|r| r.bench == "doctor" && r.value.num().is_some()));
        assert!(caps.cycle_hz > 0.0);
    }
}
