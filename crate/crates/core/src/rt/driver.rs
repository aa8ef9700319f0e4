use std::time::Duration;

use super::error::Result;
use super::request::{FileDesc, IoCompletion, IoRequest};
use super::Region;

/// Backend contract behind [`super::RingHandle`]. Generic validation
/// (flags, tables, alignment) happens in the handle before `stage`.
pub(crate) trait Driver: Send {
    fn name(&self) -> &'static str;

    /// Whether this backend can execute `req` at all.
    fn supports(&self, req: &IoRequest) -> bool;

    /// Stages one request. `desc` is the resolved handle, even for fixed targets.
    fn stage(&mut self, req: &IoRequest, desc: FileDesc) -> Result<()>;

    fn staged(&self) -> usize;

    fn submit(&mut self) -> Result<usize>;

    /// Appends between `min` and `max` completions to `out`.
    fn reap(
        &mut self,
        out: &mut Vec<IoCompletion>,
        min: usize,
        max: usize,
        timeout: Option<Duration>,
    ) -> Result<()>;

    fn register_buffers(&mut self, _regions: &[Region]) -> Result<()> {
        Ok(())
    }

    fn register_files(&mut self, _files: &[FileDesc]) -> Result<()> {
        Ok(())
    }

    fn setup_buf_ring(&mut self, group: u16, entries: u16, buf_len: u32) -> Result<()> {
        let _ = (group, entries, buf_len);
        Err(super::RtError::KindUnsupportedByBackend {
            kind: "provided-buffer-ring",
            backend: self.name(),
        })
    }

    fn provided_buffer(&mut self, _group: u16, _bid: u16) -> Option<*const u8> {
        None
    }

    fn recycle_buffer(&mut self, _group: u16, _bid: u16) {}
}
