//! Checked loads and stores.
//!
//! Loads always fault precisely. Stores fault precisely or, in
//! `ImpreciseStores` mode, are suppressed and queued until [`Simulator::sync`].
//! Syscall-style range checks report an error code and never fault.

use std::fmt;

use crate::error::{MtError, Result};
use crate::report::{AccessKind, FaultKind, FaultReport};
use crate::sim::Simulator;
use crate::tagspace::{tags_match, StoreMode, Tag, TaggedPtr, ADDR_LIMIT};

/// Error code returned by a failed range check, as `EFAULT`.
pub const EFAULT: i32 = 14;

/// A range check that found a mismatching granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RangeCheckError {
    pub code: i32,
    /// Base of the first mismatching granule.
    pub granule: u64,
    /// First mismatching byte.
    pub addr: u64,
    pub ptr_tag: Tag,
    pub mem_tag: Tag,
}

impl fmt::Display for RangeCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "range check failed (code {}) at granule 0x{:x}: ptag={} mtag={}",
            self.code, self.granule, self.ptr_tag, self.mem_tag
        )
    }
}

impl std::error::Error for RangeCheckError {}

struct Mismatch {
    addr: u64,
    granule: u64,
    mem_tag: Tag,
    partial: bool,
}

fn check_width(width: usize) -> Result<()> {
    if matches!(width, 1 | 2 | 4 | 8) {
        Ok(())
    } else {
        Err(MtError::usage(format!("access width {width} is not 1, 2, 4 or 8")))
    }
}

impl Simulator {
    /// First byte of `[addr, addr + len)` that `ptr_tag` may not touch.
    fn find_mismatch(&self, addr: u64, len: u64, ptr_tag: Tag) -> Option<Mismatch> {
        let tg = self.cfg.tg;
        let partial_tag = self.cfg.partial_tag();
        let end = addr + len;
        let mut granule = self.cfg.granule_base(addr);
        while granule < end {
            let lo = addr.max(granule);
            let hi = end.min(granule + tg);
            let mem_tag = self.shadow.get_tag(granule);
            if Some(mem_tag) == partial_tag {
                let meta = self.partial_meta(granule);
                let valid_end = granule + meta.n;
                if ptr_tag != meta.real_tag || hi > valid_end {
                    let first = if ptr_tag != meta.real_tag { lo } else { lo.max(valid_end) };
                    return Some(Mismatch {
                        addr: first,
                        granule,
                        mem_tag,
                        partial: true,
                    });
                }
            } else if !tags_match(ptr_tag, mem_tag) {
                return Some(Mismatch {
                    addr: lo,
                    granule,
                    mem_tag,
                    partial: false,
                });
            }
            granule += tg;
        }
        None
    }

    fn access_fault(&self, p: TaggedPtr, access: AccessKind, len: u64) -> Result<Option<FaultReport>> {
        if p.addr().checked_add(len).is_none_or(|end| end > ADDR_LIMIT) {
            return Err(MtError::usage(format!(
                "access of {len} bytes at 0x{:x} wraps the address space",
                p.addr()
            )));
        }
        let ptr_tag = p.tag(&self.cfg);
        Ok(self.find_mismatch(p.addr(), len, ptr_tag).map(|m| FaultReport {
            kind: FaultKind::TagMismatch,
            access,
            ptr: p,
            ptr_tag,
            mem_tag: m.mem_tag,
            addr: m.addr,
            granule: m.granule,
            provenance: self.provenance(m.addr),
            deferred: false,
            partial: m.partial,
        }))
    }

    /// Loads `width` bytes through `p`.
    pub fn load(&self, p: TaggedPtr, width: usize) -> Result<Vec<u8>> {
        check_width(width)?;
        if let Some(report) = self.access_fault(p, AccessKind::Load, width as u64)? {
            return Err(report.into());
        }
        Ok(self.mem.read(p.addr(), width as u64))
    }

    /// Stores `bytes` through `p`. A mismatching store never modifies
    /// memory.
    pub fn store(&mut self, p: TaggedPtr, bytes: &[u8]) -> Result<()> {
        check_width(bytes.len())?;
        match self.access_fault(p, AccessKind::Store, bytes.len() as u64)? {
            None => {
                self.mem.write(p.addr(), bytes);
                Ok(())
            }
            Some(report) => match self.cfg.store_mode {
                StoreMode::Precise => Err(report.into()),
                StoreMode::ImpreciseStores => {
                    self.deferred.push(FaultReport {
                        deferred: true,
                        ..report
                    });
                    Ok(())
                }
            },
        }
    }

    /// Delivers deferred store faults in program order.
    pub fn sync(&mut self) -> Vec<FaultReport> {
        std::mem::take(&mut self.deferred)
    }

    pub fn pending_faults(&self) -> &[FaultReport] {
        &self.deferred
    }

    /// Checks a user buffer the way a syscall would: returns an error code
    /// for the first mismatching granule instead of faulting.
    pub fn check_user_range(&self, p: TaggedPtr, len: u64) -> std::result::Result<(), RangeCheckError> {
        let ptr_tag = p.tag(&self.cfg);
        let Some(end) = p.addr().checked_add(len).filter(|e| *e <= ADDR_LIMIT) else {
            return Err(RangeCheckError {
                code: EFAULT,
                granule: self.cfg.granule_base(ADDR_LIMIT),
                addr: ADDR_LIMIT,
                ptr_tag,
                mem_tag: Tag::UNTAGGED,
            });
        };
        match self.find_mismatch(p.addr(), end - p.addr(), ptr_tag) {
            None => Ok(()),
            Some(m) => Err(RangeCheckError {
                code: EFAULT,
                granule: m.granule,
                addr: m.addr,
                ptr_tag,
                mem_tag: m.mem_tag,
            }),
        }
    }
}
