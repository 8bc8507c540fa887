//! Configuration, tag arithmetic, tagged-address packing and the shadow tag
//! store.
//!
//! Every `tg` bytes of simulated memory, aligned by `tg`, form a granule that
//! carries one `ts`-bit memory tag. Pointers carry a tag of the same width in
//! their top `ts` bits; the address proper lives in the low 56 bits.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::error::{MtError, Result};

/// Number of address bits in a pointer word.
pub const ADDR_BITS: u32 = 56;
/// First address outside the simulated address space.
pub const ADDR_LIMIT: u64 = 1 << ADDR_BITS;
const ADDR_MASK: u64 = ADDR_LIMIT - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreMode {
    /// Mismatching stores fault at the offending instruction.
    Precise,
    /// Mismatching stores are queued and reported at the next sync point.
    ImpreciseStores,
}

impl fmt::Display for StoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreMode::Precise => "precise",
            StoreMode::ImpreciseStores => "imprecise-stores",
        })
    }
}

/// Tagging scheme parameters plus mode flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MtConfig {
    /// Granule size in bytes.
    pub tg: u64,
    /// Tag width in bits.
    pub ts: u32,
    pub zero_on_tag: bool,
    pub precision_ext: bool,
    pub right_align: bool,
    pub sampling_rate: f64,
    pub store_mode: StoreMode,
    /// Quarantine capacity in bytes; 0 disables the quarantine.
    pub quarantine_capacity: u64,
}

impl MtConfig {
    pub fn new(tg: u64, ts: u32) -> Result<Self> {
        let cfg = MtConfig {
            tg,
            ts,
            zero_on_tag: false,
            precision_ext: false,
            right_align: false,
            sampling_rate: 1.0,
            store_mode: StoreMode::Precise,
            quarantine_capacity: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SPARC ADI-like profile: 64-byte granules, 4-bit tags.
    pub fn adi() -> Self {
        Self::new(64, 4).expect("preset is valid")
    }

    /// AArch64 HWASAN-like profile: 16-byte granules, 8-bit tags.
    pub fn hwasan() -> Self {
        Self::new(16, 8).expect("preset is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.tg, 16 | 32 | 64) {
            return Err(MtError::usage(format!(
                "granule size must be 16, 32 or 64 bytes, got {}",
                self.tg
            )));
        }
        if !matches!(self.ts, 4 | 8) {
            return Err(MtError::usage(format!(
                "tag size must be 4 or 8 bits, got {}",
                self.ts
            )));
        }
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(MtError::usage(format!(
                "sampling rate must lie in [0, 1], got {}",
                self.sampling_rate
            )));
        }
        if self.precision_ext && self.right_align {
            return Err(MtError::usage(
                "right alignment and the partial-granule extension are mutually exclusive",
            ));
        }
        Ok(())
    }

    /// Number of distinct tag values, `2^ts`.
    pub fn tag_count(&self) -> u32 {
        1 << self.ts
    }

    pub fn max_tag(&self) -> u8 {
        (self.tag_count() - 1) as u8
    }

    /// The reserved PARTIAL tag, present only with the precision extension.
    pub fn partial_tag(&self) -> Option<Tag> {
        self.precision_ext.then(|| Tag(self.max_tag()))
    }

    pub fn is_reserved(&self, tag: Tag) -> bool {
        tag.is_untagged() || Some(tag) == self.partial_tag()
    }

    /// Validates a raw tag value against `ts`.
    pub fn tag(&self, value: u8) -> Result<Tag> {
        if u32::from(value) >= self.tag_count() {
            return Err(MtError::usage(format!(
                "tag 0x{value:x} does not fit in {} bits",
                self.ts
            )));
        }
        Ok(Tag(value))
    }

    /// Tags available to allocations, in increasing order.
    pub fn usable_tags(&self) -> Vec<Tag> {
        (1..=self.max_tag())
            .map(Tag)
            .filter(|t| !self.is_reserved(*t))
            .collect()
    }

    pub fn usable_count(&self) -> u32 {
        self.tag_count() - 1 - u32::from(self.precision_ext)
    }

    pub fn round_up(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.tg) * self.tg
    }

    pub fn granule_base(&self, addr: u64) -> u64 {
        addr - addr % self.tg
    }

    /// Probability that two independent uniformly random tags differ,
    /// `(2^ts - 1) / 2^ts`.
    pub fn theoretical_detection(&self) -> f64 {
        let n = f64::from(self.tag_count());
        (n - 1.0) / n
    }
}

/// A memory or pointer tag. Only meaningful together with an [`MtConfig`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Tag(u8);

impl Tag {
    pub const UNTAGGED: Tag = Tag(0);

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_untagged(self) -> bool {
        self.0 == 0
    }

    /// Builds a tag without checking it against a configuration.
    pub(crate) fn from_raw(value: u8) -> Self {
        Tag(value)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}", self.0)
    }
}

/// A 64-bit pointer word: tag in the top `ts` bits, address in bits 0..56,
/// everything in between zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaggedPtr(u64);

impl TaggedPtr {
    pub fn pack(addr: u64, tag: Tag, cfg: &MtConfig) -> Result<Self> {
        if addr >= ADDR_LIMIT {
            return Err(MtError::usage(format!(
                "address 0x{addr:x} is outside the 56-bit address space"
            )));
        }
        let tag = cfg.tag(tag.value())?;
        Ok(TaggedPtr(
            (u64::from(tag.value()) << (64 - cfg.ts)) | addr,
        ))
    }

    /// Accepts a raw word if it is laid out the way [`TaggedPtr::pack`]
    /// would produce it.
    pub fn from_word(word: u64, cfg: &MtConfig) -> Result<Self> {
        let reserved_bits = !ADDR_MASK & !(u64::MAX << (64 - cfg.ts));
        if word & reserved_bits != 0 {
            return Err(MtError::usage(format!(
                "word 0x{word:016x} has bits set between the tag and the address"
            )));
        }
        Ok(TaggedPtr(word))
    }

    pub fn word(self) -> u64 {
        self.0
    }

    pub fn addr(self) -> u64 {
        self.0 & ADDR_MASK
    }

    pub fn tag(self, cfg: &MtConfig) -> Tag {
        Tag((self.0 >> (64 - cfg.ts)) as u8)
    }

    pub fn unpack(self, cfg: &MtConfig) -> (u64, Tag) {
        (self.addr(), self.tag(cfg))
    }

    /// Pointer arithmetic that keeps the tag and stays inside the address
    /// space.
    pub fn offset(self, delta: i64) -> Result<Self> {
        let addr = self
            .addr()
            .checked_add_signed(delta)
            .filter(|a| *a < ADDR_LIMIT)
            .ok_or_else(|| {
                MtError::usage(format!(
                    "offset {delta} moves 0x{:x} outside the address space",
                    self.addr()
                ))
            })?;
        Ok(TaggedPtr((self.0 & !ADDR_MASK) | addr))
    }

    pub fn with_tag(self, tag: Tag, cfg: &MtConfig) -> Result<Self> {
        Self::pack(self.addr(), tag, cfg)
    }
}

impl fmt::Display for TaggedPtr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:016x}", self.0)
    }
}

pub fn granule_index(addr: u64, cfg: &MtConfig) -> u64 {
    addr / cfg.tg
}

/// Tag check with match-all semantics for memory tag 0.
///
/// PARTIAL granules are resolved by the precision extension before this is
/// consulted.
pub fn tags_match(ptr_tag: Tag, mem_tag: Tag) -> bool {
    mem_tag.is_untagged() || ptr_tag == mem_tag
}

/// Shadow bits needed to tag `region_bytes` of memory.
pub fn storage_bits(region_bytes: u64, cfg: &MtConfig) -> u64 {
    u64::from(cfg.ts) * region_bytes.div_ceil(cfg.tg)
}

/// Sparse granule-index to tag map. Absent granules read as tag 0.
#[derive(Clone, Debug)]
pub struct ShadowStore {
    tg: u64,
    tags: HashMap<u64, Tag>,
    writes: u64,
}

impl ShadowStore {
    pub fn new(cfg: &MtConfig) -> Self {
        ShadowStore {
            tg: cfg.tg,
            tags: HashMap::new(),
            writes: 0,
        }
    }

    pub fn get_tag(&self, addr: u64) -> Tag {
        self.tags
            .get(&(addr / self.tg))
            .copied()
            .unwrap_or(Tag::UNTAGGED)
    }

    /// Tags every granule of `[addr, addr + len)`.
    pub fn set_tag_range(&mut self, addr: u64, len: u64, tag: Tag) -> Result<()> {
        if len == 0 || !len.is_multiple_of(self.tg) {
            return Err(MtError::usage(format!(
                "tag range length {len} is not a positive multiple of {}",
                self.tg
            )));
        }
        if !addr.is_multiple_of(self.tg) {
            return Err(MtError::usage(format!(
                "tag range start 0x{addr:x} is not {}-byte aligned",
                self.tg
            )));
        }
        if addr.checked_add(len).is_none_or(|end| end > ADDR_LIMIT) {
            return Err(MtError::usage(format!(
                "tag range 0x{addr:x}+{len} leaves the address space"
            )));
        }
        let first = addr / self.tg;
        for idx in first..first + len / self.tg {
            if tag.is_untagged() {
                self.tags.remove(&idx);
            } else {
                self.tags.insert(idx, tag);
            }
            self.writes += 1;
        }
        Ok(())
    }

    /// Granule tag writes performed so far.
    pub fn write_count(&self) -> u64 {
        self.writes
    }

    /// Granules currently holding a nonzero tag.
    pub fn tagged_granules(&self) -> usize {
        self.tags.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tg: u64, ts: u32) -> MtConfig {
        MtConfig::new(tg, ts).unwrap()
    }

    #[test]
    fn presets() {
        let adi = MtConfig::adi();
        assert_eq!((adi.tg, adi.ts), (64, 4));
        let hw = MtConfig::hwasan();
        assert_eq!((hw.tg, hw.ts), (16, 8));
        assert!(MtConfig::new(8, 4).is_err());
        assert!(MtConfig::new(16, 6).is_err());
    }

    #[test]
    fn reserved_tags() {
        let mut c = cfg(16, 4);
        assert_eq!(c.usable_tags().len(), 15);
        assert!(c.is_reserved(Tag::UNTAGGED));
        assert!(!c.is_reserved(Tag(15)));
        c.precision_ext = true;
        assert!(c.is_reserved(Tag(15)));
        assert_eq!(c.usable_tags().len(), 14);
        assert_eq!(c.usable_count(), 14);
    }

    #[test]
    fn pack_examples() {
        let c8 = cfg(16, 8);
        let c4 = cfg(64, 4);
        assert_eq!(TaggedPtr::pack(0x1000, Tag(0), &c8).unwrap().word(), 0x1000);
        assert_eq!(
            TaggedPtr::pack(0x1000, Tag(0xAB), &c8).unwrap().word(),
            0xAB00_0000_0000_1000
        );
        assert_eq!(
            TaggedPtr::pack(0x2000, Tag(0x7), &c4).unwrap().word(),
            0x7000_0000_0000_2000
        );
        assert!(TaggedPtr::pack(0x2000, Tag(0x10), &c4).is_err());
        assert!(TaggedPtr::pack(ADDR_LIMIT, Tag(1), &c8).is_err());
    }

    #[test]
    fn unpack_examples() {
        let c8 = cfg(16, 8);
        let c4 = cfg(64, 4);
        let p = TaggedPtr::from_word(0xAB00_0000_0000_1000, &c8).unwrap();
        assert_eq!(p.unpack(&c8), (0x1000, Tag(0xAB)));
        let p = TaggedPtr::from_word(0x1000, &c8).unwrap();
        assert_eq!(p.unpack(&c8), (0x1000, Tag(0)));
        let p = TaggedPtr::from_word(0x7000_0000_0000_2000, &c4).unwrap();
        assert_eq!(p.unpack(&c4), (0x2000, Tag(0x7)));
        // bits 56..60 are not part of a 4-bit tag
        assert!(TaggedPtr::from_word(0x0100_0000_0000_2000, &c4).is_err());
    }

    #[test]
    fn offset_keeps_tag() {
        let c = cfg(16, 8);
        let p = TaggedPtr::pack(0x1000, Tag(0x42), &c).unwrap();
        let q = p.offset(16).unwrap();
        assert_eq!(q.unpack(&c), (0x1010, Tag(0x42)));
        assert_eq!(q.offset(-17).unwrap().addr(), 0xfff);
        assert!(p.offset(-0x1001).is_err());
    }

    #[test]
    fn granule_index_examples() {
        assert_eq!(granule_index(0, &cfg(16, 8)), 0);
        assert_eq!(granule_index(17, &cfg(16, 8)), 1);
        assert_eq!(granule_index(64, &cfg(64, 4)), 1);
    }

    #[test]
    fn set_and_get() {
        let c = cfg(16, 8);
        let mut s = ShadowStore::new(&c);
        assert_eq!(s.get_tag(0x100), Tag(0));
        s.set_tag_range(0x100, 0x40, Tag(5)).unwrap();
        for g in 16..20 {
            assert_eq!(s.get_tag(g * 16), Tag(5));
        }
        assert_eq!(s.get_tag(0x140), Tag(0));
        assert_eq!(s.get_tag(0x101), s.get_tag(0x10f));
        assert!(matches!(s.set_tag_range(0x100, 0, Tag(1)), Err(MtError::Usage(_))));
        assert!(matches!(s.set_tag_range(0x108, 16, Tag(1)), Err(MtError::Usage(_))));
        assert!(matches!(s.set_tag_range(0x100, 24, Tag(1)), Err(MtError::Usage(_))));
        assert_eq!(s.write_count(), 4);
    }

    #[test]
    fn match_rules() {
        assert!(tags_match(Tag(3), Tag(0)));
        assert!(tags_match(Tag(3), Tag(3)));
        assert!(!tags_match(Tag(3), Tag(4)));
        assert!(!tags_match(Tag(0), Tag(4)));
    }

    #[test]
    fn storage_ratio() {
        let c = cfg(16, 8);
        // one shadow byte per 16 application bytes
        assert_eq!(storage_bits(4096, &c) / 8, 256);
        assert_eq!(storage_bits(17, &c), 16);
        assert_eq!(storage_bits(64, &cfg(64, 4)), 4);
    }
}
