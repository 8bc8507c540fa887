use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocator::Heap;
use crate::error::{MtError, Result};
use crate::memory::Memory;
use crate::report::{FaultReport, Provenance};
use crate::stack::Stack;
use crate::tagspace::{MtConfig, ShadowStore, Tag, ADDR_LIMIT};

/// Placement of the heap arena and the stack inside the simulated address
/// space. The two regions never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub heap_base: u64,
    pub heap_capacity: u64,
    /// One past the highest stack address; frames grow downward from here.
    pub stack_top: u64,
    pub stack_capacity: u64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            heap_base: 0x1000_0000,
            heap_capacity: 64 << 20,
            stack_top: 0x7f00_0000_0000,
            stack_capacity: 1 << 20,
        }
    }
}

impl Layout {
    fn validate(&self) -> Result<()> {
        let heap_end = self.heap_base.checked_add(self.heap_capacity);
        let stack_bottom = self.stack_top.checked_sub(self.stack_capacity);
        match (heap_end, stack_bottom) {
            (Some(he), Some(sb)) if self.stack_top <= ADDR_LIMIT && (he <= sb || self.stack_top <= self.heap_base) => Ok(()),
            _ => Err(MtError::usage("heap and stack regions overlap or leave the address space")),
        }
    }
}

/// One simulated tagged machine: shadow store, backing memory, heap, stack
/// and the deferred store-fault queue.
pub struct Simulator {
    pub(crate) cfg: MtConfig,
    pub(crate) shadow: ShadowStore,
    pub(crate) mem: Memory,
    pub(crate) heap: Heap,
    pub(crate) stack: Stack,
    pub(crate) deferred: Vec<FaultReport>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) seed: u64,
}

impl Simulator {
    pub fn new(cfg: MtConfig, seed: u64) -> Result<Self> {
        Self::with_layout(cfg, seed, Layout::default())
    }

    pub fn with_layout(cfg: MtConfig, seed: u64, layout: Layout) -> Result<Self> {
        cfg.validate()?;
        layout.validate()?;
        if !layout.heap_base.is_multiple_of(cfg.tg) || !layout.stack_top.is_multiple_of(cfg.tg) {
            return Err(MtError::usage("heap base and stack top must be granule aligned"));
        }
        Ok(Simulator {
            shadow: ShadowStore::new(&cfg),
            mem: Memory::default(),
            heap: Heap::new(layout.heap_base, layout.heap_capacity),
            stack: Stack::new(layout.stack_top, layout.stack_capacity),
            deferred: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            cfg,
        })
    }

    /// Like [`Simulator::new`] but draws from stream `stream` of the seed, so
    /// that trial `i` of a batch is independent of every other trial.
    pub fn with_stream(cfg: MtConfig, seed: u64, stream: u64) -> Result<Self> {
        let mut sim = Self::new(cfg, seed)?;
        sim.rng.set_stream(stream);
        Ok(sim)
    }

    pub fn cfg(&self) -> &MtConfig {
        &self.cfg
    }

    pub fn shadow(&self) -> &ShadowStore {
        &self.shadow
    }

    pub fn get_tag(&self, addr: u64) -> Tag {
        self.shadow.get_tag(addr)
    }

    /// Tags `[addr, addr + len)` directly, bypassing the allocator.
    pub fn set_tag_range(&mut self, addr: u64, len: u64, tag: Tag) -> Result<()> {
        let tag = self.cfg.tag(tag.value())?;
        self.shadow.set_tag_range(addr, len, tag)
    }

    /// Reads memory without any tag check.
    pub fn peek(&self, addr: u64, len: u64) -> Vec<u8> {
        self.mem.read(addr, len)
    }

    /// Writes memory without any tag check.
    pub fn poke(&mut self, addr: u64, bytes: &[u8]) {
        self.mem.write(addr, bytes)
    }

    /// Uniformly random non-reserved tag outside `exclude`, or `None` when
    /// `exclude` covers every usable tag.
    pub(crate) fn random_tag_excluding(&mut self, exclude: &[Tag]) -> Option<Tag> {
        let usable = self.cfg.usable_count();
        let excluded = (1..=usable)
            .filter(|v| exclude.contains(&Tag::from_raw(*v as u8)))
            .count() as u32;
        if excluded >= usable {
            return None;
        }
        // usable tags are exactly 1..=usable_count
        loop {
            let tag = Tag::from_raw(self.rng.gen_range(1..=usable) as u8);
            if !exclude.contains(&tag) {
                return Some(tag);
            }
        }
    }

    pub(crate) fn random_tag(&mut self) -> Tag {
        self.random_tag_excluding(&[])
            .expect("every configuration has usable tags")
    }

    /// Tag an access to this granule must match: the shadow tag, or the real
    /// tag kept in a PARTIAL granule's metadata.
    pub(crate) fn effective_tag(&self, addr: u64) -> Tag {
        let tag = self.shadow.get_tag(addr);
        match self.cfg.partial_tag() {
            Some(partial) if tag == partial => self.partial_meta(addr).real_tag,
            _ => tag,
        }
    }

    /// Effective tags of the granules just below `base` and at `end`.
    pub(crate) fn neighbor_tags(&self, base: u64, end: u64) -> [Tag; 2] {
        let below = match base.checked_sub(1) {
            Some(a) => self.effective_tag(a),
            None => Tag::UNTAGGED,
        };
        let above = if end < ADDR_LIMIT {
            self.effective_tag(end)
        } else {
            Tag::UNTAGGED
        };
        [below, above]
    }

    pub(crate) fn provenance(&self, addr: u64) -> Option<Provenance> {
        self.heap.chunk_containing(addr).map(|c| Provenance {
            chunk: c.id,
            state: c.state,
        })
    }
}
