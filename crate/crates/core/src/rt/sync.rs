//! Blocking backend: every staged request runs as a plain syscall at submit.

use std::collections::VecDeque;
use std::io;
use std::time::Duration;

use super::driver::Driver;
use super::error::{Result, RtError};
use super::request::{FileDesc, IoCompletion, IoKind, IoRequest};

struct Staged {
    req: IoRequest,
    fd: i32,
}

pub(crate) struct SyncDriver {
    staged: Vec<Staged>,
    cq: VecDeque<IoCompletion>,
}

impl SyncDriver {
    pub(crate) fn new() -> SyncDriver {
        SyncDriver {
            staged: Vec::new(),
            cq: VecDeque::new(),
        }
    }

    fn run(s: &Staged) -> i32 {
        let ptr = s.req.buf.ptr() as *mut libc::c_void;
        let len = s.req.buf.len();
        let off = s.req.offset as i64;
        // SAFETY: buffer validity is the caller's enqueue contract.
        let rc = unsafe {
            match s.req.kind {
                IoKind::Nop => 0,
                IoKind::Read => libc::pread(s.fd, ptr, len, off),
                IoKind::Write => libc::pwrite(s.fd, ptr, len, off),
                IoKind::Fsync { datasync: true } => libc::fdatasync(s.fd) as isize,
                IoKind::Fsync { datasync: false } => libc::fsync(s.fd) as isize,
                IoKind::Send => libc::send(s.fd, ptr, len, libc::MSG_NOSIGNAL),
                IoKind::Recv => libc::recv(s.fd, ptr, len, 0),
                _ => unreachable!("rejected by supports()"),
            }
        };
        if rc < 0 {
            -io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO)
        } else {
            rc as i32
        }
    }
}

impl Driver for SyncDriver {
    fn name(&self) -> &'static str {
        "posix-sync"
    }

    fn supports(&self, req: &IoRequest) -> bool {
        let f = &req.flags;
        !req.kind.is_nvme() && !f.zero_copy && !f.multishot && !f.provided_buffers
    }

    fn stage(&mut self, req: &IoRequest, desc: FileDesc) -> Result<()> {
        self.staged.push(Staged {
            req: *req,
            fd: desc.fd,
        });
        Ok(())
    }

    fn staged(&self) -> usize {
        self.staged.len()
    }

    fn submit(&mut self) -> Result<usize> {
        let staged = std::mem::take(&mut self.staged);
        let n = staged.len();
        let mut cancel_rest = false;
        for s in &staged {
            if cancel_rest {
                self.cq
                    .push_back(IoCompletion::error(s.req.tag, libc::ECANCELED));
                cancel_rest = s.req.flags.link_next;
                continue;
            }
            let res = Self::run(s);
            self.cq.push_back(IoCompletion::from_result(s.req.tag, res));
            cancel_rest = res < 0 && s.req.flags.link_next;
        }
        Ok(n)
    }

    fn reap(
        &mut self,
        out: &mut Vec<IoCompletion>,
        min: usize,
        max: usize,
        _timeout: Option<Duration>,
    ) -> Result<()> {
        // Everything submitted has already completed.
        if self.cq.len() < min {
            return Err(RtError::TimedOut {
                wanted: min,
                got: self.cq.len(),
            });
        }
        let take = self.cq.len().min(max);
        out.extend(self.cq.drain(..take));
        Ok(())
    }
}
