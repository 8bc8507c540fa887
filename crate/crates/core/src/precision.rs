//! Partial-granule precision extension.
//!
//! A granule whose first `n` bytes belong to an object is tagged with the
//! reserved PARTIAL value (the maximum tag). Byte `tg - 2` of the granule
//! holds `n` and byte `tg - 1` holds the real tag, so `n` can be at most
//! `tg - 2`. An access into such a granule matches only when the pointer
//! carries the real tag and stays inside the first `n` bytes, which also
//! keeps the metadata bytes out of reach of the program.

use crate::error::{MtError, Result};
use crate::sim::Simulator;
use crate::tagspace::Tag;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartialGranuleMeta {
    pub n: u64,
    pub real_tag: Tag,
}

impl Simulator {
    /// Marks the granule at `addr` as having `n` valid bytes owned by
    /// `real_tag`.
    pub fn mark_partial(&mut self, addr: u64, n: u64, real_tag: Tag) -> Result<()> {
        let tg = self.cfg.tg;
        let Some(partial) = self.cfg.partial_tag() else {
            return Err(MtError::usage("partial granules need the precision extension"));
        };
        if !addr.is_multiple_of(tg) {
            return Err(MtError::usage(format!("0x{addr:x} is not granule aligned")));
        }
        if n == 0 || n > tg - 2 {
            return Err(MtError::usage(format!(
                "partial length {n} outside 1..={}",
                tg - 2
            )));
        }
        let real_tag = self.cfg.tag(real_tag.value())?;
        if self.cfg.is_reserved(real_tag) {
            return Err(MtError::usage(format!("{real_tag} is a reserved tag")));
        }
        self.shadow.set_tag_range(addr, tg, partial)?;
        self.mem.write(addr + tg - 2, &[n as u8, real_tag.value()]);
        Ok(())
    }

    /// Reads the metadata of the granule containing `addr`. Only meaningful
    /// when that granule is PARTIAL.
    pub fn partial_meta(&self, addr: u64) -> PartialGranuleMeta {
        let base = self.cfg.granule_base(addr);
        let tg = self.cfg.tg;
        PartialGranuleMeta {
            n: u64::from(self.mem.read_byte(base + tg - 2)),
            real_tag: Tag::from_raw(self.mem.read_byte(base + tg - 1)),
        }
    }

    pub fn is_partial(&self, addr: u64) -> bool {
        self.cfg.partial_tag() == Some(self.shadow.get_tag(addr))
    }

    /// Whether an access of `width` bytes at `offset` inside the PARTIAL
    /// granule at `addr` matches `ptr_tag`.
    pub fn check_partial(&self, addr: u64, offset: u64, width: u64, ptr_tag: Tag) -> Result<bool> {
        if !self.is_partial(addr) {
            return Err(MtError::usage(format!(
                "granule at 0x{:x} is not partial",
                self.cfg.granule_base(addr)
            )));
        }
        let meta = self.partial_meta(addr);
        Ok(ptr_tag == meta.real_tag && offset + width <= meta.n)
    }
}
