//! Tagged heap allocator.
//!
//! Allocations are rounded up to whole granules, placed first-fit by address
//! among reusable blocks (else bump allocated), tagged, and handed out as
//! tagged pointers. Frees validate the pointer, retag the chunk with a fresh
//! tag and optionally park it in a byte-bounded FIFO quarantine.
//!
//! Sampled-out allocations are untagged (tag 0 pointer over tag 0 memory).
//! They recycle a separate free list so they never land on retagged memory.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::error::{MtError, Result};
use crate::report::{AccessKind, FaultKind, FaultReport, Provenance};
use crate::sim::Simulator;
use crate::tagspace::{Tag, TaggedPtr};

/// Fill byte for fresh allocations when zero-on-tag is off.
pub const UNINIT_SENTINEL: u8 = 0xAA;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TagPolicy {
    Random,
    AdjacentDistinct,
    /// Tags each allocation with probability `rate`, with a random tag.
    Sampled { rate: f64 },
}

impl fmt::Display for TagPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagPolicy::Random => f.write_str("random"),
            TagPolicy::AdjacentDistinct => f.write_str("adjacent-distinct"),
            TagPolicy::Sampled { rate } => write!(f, "sampled({rate})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChunkState {
    Live,
    Quarantined,
    Freed,
}

impl fmt::Display for ChunkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkState::Live => "live",
            ChunkState::Quarantined => "quarantined",
            ChunkState::Freed => "freed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// Allocation sequence number, starting at 1.
    pub id: u64,
    pub base: u64,
    /// Address handed to the program; differs from `base` only when right
    /// aligned.
    pub user_addr: u64,
    pub requested: u64,
    pub aligned: u64,
    pub tag: Tag,
    pub tagged: bool,
    /// Final granule is marked PARTIAL.
    pub partial: bool,
    pub state: ChunkState,
}

impl Chunk {
    pub fn end(&self) -> u64 {
        self.base + self.aligned
    }

    fn contains(&self, addr: u64) -> bool {
        (self.base..self.end()).contains(&addr)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocatorStats {
    pub live_requested: u64,
    pub live_aligned: u64,
    pub peak_requested: u64,
    pub peak_aligned: u64,
    pub allocs: u64,
    pub frees: u64,
    pub tagged_allocs: u64,
    pub quarantined_chunks: u64,
    pub quarantined_bytes: u64,
    pub partial_granules: u64,
    /// Allocations whose tail was too long for the partial-granule metadata
    /// and fell back to whole-granule tagging.
    pub partial_fallbacks: u64,
}

/// Address-ordered free blocks, coalesced on insert.
#[derive(Clone, Debug, Default)]
struct FreeList {
    blocks: BTreeMap<u64, u64>,
}

impl FreeList {
    fn insert(&mut self, mut base: u64, mut len: u64) {
        if let Some((&prev, &plen)) = self.blocks.range(..base).next_back() {
            if prev + plen == base {
                self.blocks.remove(&prev);
                base = prev;
                len += plen;
            }
        }
        if let Some(next_len) = self.blocks.remove(&(base + len)) {
            len += next_len;
        }
        self.blocks.insert(base, len);
    }

    fn take_first_fit(&mut self, len: u64) -> Option<u64> {
        let (&base, &block) = self.blocks.iter().find(|(_, l)| **l >= len)?;
        self.blocks.remove(&base);
        if block > len {
            self.blocks.insert(base + len, block - len);
        }
        Some(base)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Heap {
    base: u64,
    capacity: u64,
    bump: u64,
    next_id: u64,
    /// Live and quarantined chunks by base.
    chunks: BTreeMap<u64, Chunk>,
    /// Last occupant of each released range, kept until the range is reused.
    freed: BTreeMap<u64, Chunk>,
    free_tagged: FreeList,
    free_untagged: FreeList,
    quarantine: VecDeque<u64>,
    stats: AllocatorStats,
}

impl Heap {
    pub(crate) fn new(base: u64, capacity: u64) -> Self {
        Heap {
            base,
            capacity,
            bump: base,
            next_id: 1,
            chunks: BTreeMap::new(),
            freed: BTreeMap::new(),
            free_tagged: FreeList::default(),
            free_untagged: FreeList::default(),
            quarantine: VecDeque::new(),
            stats: AllocatorStats::default(),
        }
    }

    fn place(&mut self, aligned: u64, tagged: bool) -> Result<u64> {
        let list = if tagged {
            &mut self.free_tagged
        } else {
            &mut self.free_untagged
        };
        if let Some(base) = list.take_first_fit(aligned) {
            return Ok(base);
        }
        let available = self.base + self.capacity - self.bump;
        if aligned > available {
            return Err(MtError::OutOfMemory {
                requested: aligned,
                available,
            });
        }
        let base = self.bump;
        self.bump += aligned;
        Ok(base)
    }

    /// Drops freed-chunk records overlapping `[base, end)`.
    fn forget_freed(&mut self, base: u64, end: u64) {
        let stale: Vec<u64> = self
            .freed
            .range(..end)
            .rev()
            .take_while(|(_, c)| c.end() > base)
            .map(|(b, _)| *b)
            .collect();
        for b in stale {
            self.freed.remove(&b);
        }
    }

    fn release(&mut self, base: u64) {
        let mut chunk = self.chunks.remove(&base).expect("released chunk exists");
        chunk.state = ChunkState::Freed;
        if chunk.tagged {
            self.free_tagged.insert(chunk.base, chunk.aligned);
        } else {
            self.free_untagged.insert(chunk.base, chunk.aligned);
        }
        self.freed.insert(base, chunk);
    }

    fn evict_front(&mut self) -> bool {
        let Some(base) = self.quarantine.pop_front() else {
            return false;
        };
        let aligned = self.chunks[&base].aligned;
        self.stats.quarantined_chunks -= 1;
        self.stats.quarantined_bytes -= aligned;
        self.release(base);
        true
    }

    pub(crate) fn chunk_containing(&self, addr: u64) -> Option<&Chunk> {
        fn lookup(map: &BTreeMap<u64, Chunk>, addr: u64) -> Option<&Chunk> {
            map.range(..=addr)
                .next_back()
                .map(|(_, c)| c)
                .filter(|c| c.contains(addr))
        }
        lookup(&self.chunks, addr).or_else(|| lookup(&self.freed, addr))
    }

    pub(crate) fn live_chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values().filter(|c| c.state == ChunkState::Live)
    }
}

impl Simulator {
    /// Allocates `size` bytes (0 is treated as 1) and returns a tagged
    /// pointer to them.
    pub fn malloc(&mut self, size: u64, policy: TagPolicy) -> Result<TaggedPtr> {
        let cfg = self.cfg.clone();
        let requested = size.max(1);
        let aligned = requested
            .checked_next_multiple_of(cfg.tg)
            .ok_or(MtError::OutOfMemory {
                requested: size,
                available: 0,
            })?;
        let tagged = match policy {
            TagPolicy::Sampled { rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(MtError::usage(format!("sampling rate {rate} outside [0, 1]")));
                }
                self.rng.gen_bool(rate)
            }
            TagPolicy::Random | TagPolicy::AdjacentDistinct => true,
        };
        let base = self.heap.place(aligned, tagged)?;
        let end = base + aligned;
        self.heap.forget_freed(base, end);

        let tag = if !tagged {
            Tag::UNTAGGED
        } else if policy == TagPolicy::AdjacentDistinct {
            let neighbors = self.neighbor_tags(base, end);
            self.random_tag_excluding(&neighbors)
                .expect("at least three usable tags")
        } else {
            self.random_tag()
        };

        let user_addr = if cfg.right_align {
            end - requested
        } else {
            base
        };
        let fill = if cfg.zero_on_tag { 0 } else { UNINIT_SENTINEL };
        self.mem.fill(user_addr, requested, fill);

        let mut partial = false;
        if tagged {
            self.shadow.set_tag_range(base, aligned, tag)?;
            let tail = requested % cfg.tg;
            if cfg.precision_ext && tail != 0 {
                if tail <= cfg.tg - 2 {
                    self.mark_partial(end - cfg.tg, tail, tag)?;
                    partial = true;
                    self.heap.stats.partial_granules += 1;
                } else {
                    self.heap.stats.partial_fallbacks += 1;
                }
            }
        }

        let heap = &mut self.heap;
        let id = heap.next_id;
        heap.next_id += 1;
        heap.chunks.insert(
            base,
            Chunk {
                id,
                base,
                user_addr,
                requested,
                aligned,
                tag,
                tagged,
                partial,
                state: ChunkState::Live,
            },
        );
        let stats = &mut heap.stats;
        stats.allocs += 1;
        stats.tagged_allocs += u64::from(tagged);
        stats.live_requested += requested;
        stats.live_aligned += aligned;
        stats.peak_requested = stats.peak_requested.max(stats.live_requested);
        stats.peak_aligned = stats.peak_aligned.max(stats.live_aligned);

        TaggedPtr::pack(user_addr, tag, &cfg)
    }

    /// Frees the chunk `p` points to, retagging its memory so that dangling
    /// pointers mismatch until the memory is reused.
    pub fn free(&mut self, p: TaggedPtr) -> Result<()> {
        let (addr, ptr_tag) = p.unpack(&self.cfg);
        let fault = |sim: &Self, kind: FaultKind, chunk: Option<&Chunk>| {
            MtError::from(FaultReport {
                kind,
                access: AccessKind::Free,
                ptr: p,
                ptr_tag,
                mem_tag: sim.shadow.get_tag(addr),
                addr,
                granule: sim.cfg.granule_base(addr),
                provenance: chunk.map(|c| Provenance {
                    chunk: c.id,
                    state: c.state,
                }),
                deferred: false,
                partial: false,
            })
        };

        let chunk = match self.heap.chunk_containing(addr) {
            Some(c) => c.clone(),
            None => return Err(fault(self, FaultKind::InvalidFree, None)),
        };
        if addr != chunk.user_addr {
            return Err(fault(self, FaultKind::InvalidFree, Some(&chunk)));
        }
        if chunk.state != ChunkState::Live {
            return Err(fault(self, FaultKind::DoubleFree, Some(&chunk)));
        }
        if ptr_tag != chunk.tag {
            return Err(fault(self, FaultKind::InvalidFree, Some(&chunk)));
        }

        if chunk.tagged {
            let [below, above] = self.neighbor_tags(chunk.base, chunk.end());
            let retag = self
                .random_tag_excluding(&[chunk.tag, below, above])
                .or_else(|| self.random_tag_excluding(&[chunk.tag]))
                .expect("at least two usable tags");
            self.shadow.set_tag_range(chunk.base, chunk.aligned, retag)?;
        }

        let capacity = self.cfg.quarantine_capacity;
        let heap = &mut self.heap;
        heap.stats.frees += 1;
        heap.stats.live_requested -= chunk.requested;
        heap.stats.live_aligned -= chunk.aligned;
        if capacity == 0 {
            heap.release(chunk.base);
            return Ok(());
        }
        heap.chunks
            .get_mut(&chunk.base)
            .expect("live chunk")
            .state = ChunkState::Quarantined;
        heap.quarantine.push_back(chunk.base);
        heap.stats.quarantined_chunks += 1;
        heap.stats.quarantined_bytes += chunk.aligned;
        while heap.stats.quarantined_bytes > capacity && heap.evict_front() {}
        Ok(())
    }

    /// Releases every quarantined chunk for reuse, oldest first.
    pub fn quarantine_flush(&mut self) -> usize {
        let mut released = 0;
        while self.heap.evict_front() {
            released += 1;
        }
        released
    }

    pub fn stats(&self) -> AllocatorStats {
        self.heap.stats.clone()
    }

    /// The chunk (live, quarantined, or the last freed occupant) whose
    /// granules contain `addr`.
    pub fn chunk_at(&self, addr: u64) -> Option<&Chunk> {
        self.heap.chunk_containing(addr)
    }

    pub fn live_chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.heap.live_chunks()
    }
}
