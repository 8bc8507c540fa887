//! Tagged stack frames, as emitted by an instrumenting compiler.
//!
//! The prologue aligns every local to the granule size and tags it; the
//! epilogue retags the whole frame so saved local pointers mismatch after
//! return. Scopes can be closed early to catch use-after-scope.

use serde::Serialize;

use crate::error::{MtError, Result};
use crate::sim::Simulator;
use crate::tagspace::{MtConfig, Tag, TaggedPtr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeState {
    InScope,
    OutOfScope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalSlot {
    /// Offset from the frame base.
    pub offset: u64,
    pub declared: u64,
    pub aligned: u64,
    pub tag: Tag,
    pub state: ScopeState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Frame sequence number within its simulator.
    pub seq: u64,
    /// Lowest address of the frame.
    pub base: u64,
    pub base_tag: Tag,
    pub locals: Vec<LocalSlot>,
    pub original_size: u64,
    pub aligned_size: u64,
}

impl Frame {
    /// Tagged pointer to local `slot`.
    pub fn local_ptr(&self, slot: usize, cfg: &MtConfig) -> Result<TaggedPtr> {
        let local = self
            .locals
            .get(slot)
            .ok_or_else(|| MtError::usage(format!("frame {} has no local {slot}", self.seq)))?;
        TaggedPtr::pack(self.base + local.offset, local.tag, cfg)
    }

    pub fn overhead(&self) -> FrameOverhead {
        FrameOverhead::new(self.original_size, self.aligned_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameOverhead {
    pub original: u64,
    pub aligned: u64,
    /// `(aligned - original) / original` in percent; 0 for empty frames.
    pub percent: f64,
}

impl FrameOverhead {
    fn new(original: u64, aligned: u64) -> Self {
        let percent = if original == 0 {
            0.0
        } else {
            (aligned - original) as f64 / original as f64 * 100.0
        };
        FrameOverhead {
            original,
            aligned,
            percent,
        }
    }

    /// Overhead of a frame with the given local sizes at granule size `tg`.
    pub fn for_locals(sizes: &[u64], tg: u64) -> Self {
        let original = sizes.iter().sum();
        let aligned = sizes.iter().map(|s| s.max(&1).div_ceil(tg) * tg).sum();
        Self::new(original, aligned)
    }
}

/// Frame base tag: a pure function of frame base, sequence number and seed,
/// standing in for a tag derived from the frame pointer.
pub fn derive_base_tag(base: u64, seq: u64, seed: u64, cfg: &MtConfig) -> Tag {
    let mut x = base ^ seq.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.rotate_left(32);
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    slot_tag(Tag::from_raw((x % u64::from(cfg.usable_count())) as u8 + 1), 0, cfg)
}

/// Tag of the `index`-th local given the frame's base tag, stepping through
/// usable tags and wrapping past reserved values.
pub fn slot_tag(base_tag: Tag, index: usize, cfg: &MtConfig) -> Tag {
    let usable = u64::from(cfg.usable_count());
    let start = u64::from(base_tag.value().max(1)) - 1;
    Tag::from_raw(((start + index as u64) % usable) as u8 + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct Stack {
    top: u64,
    capacity: u64,
    sp: u64,
    next_seq: u64,
    frames: Vec<Frame>,
}

impl Stack {
    pub(crate) fn new(top: u64, capacity: u64) -> Self {
        Stack {
            top,
            capacity,
            sp: top,
            next_seq: 0,
            frames: Vec::new(),
        }
    }
}

impl Simulator {
    /// Pushes a frame with locals of the given sizes (0 counts as 1 byte).
    pub fn enter_frame(&mut self, locals: &[u64]) -> Result<Frame> {
        let cfg = self.cfg.clone();
        let aligned: Vec<u64> = locals.iter().map(|s| cfg.round_up((*s).max(1))).collect();
        let total: u64 = aligned.iter().sum();
        let limit = self.stack.top - self.stack.capacity;
        let base = self
            .stack
            .sp
            .checked_sub(total)
            .filter(|b| *b >= limit)
            .ok_or(MtError::OutOfMemory {
                requested: total,
                available: self.stack.sp - limit,
            })?;
        let seq = self.stack.next_seq;
        let base_tag = derive_base_tag(base, seq, self.seed, &cfg);
        let fill = if cfg.zero_on_tag { 0 } else { crate::allocator::UNINIT_SENTINEL };

        let mut slots = Vec::with_capacity(locals.len());
        let mut offset = 0;
        for (i, (&declared, &len)) in locals.iter().zip(&aligned).enumerate() {
            let tag = slot_tag(base_tag, i, &cfg);
            self.shadow.set_tag_range(base + offset, len, tag)?;
            self.mem.fill(base + offset, declared, fill);
            slots.push(LocalSlot {
                offset,
                declared,
                aligned: len,
                tag,
                state: ScopeState::InScope,
            });
            offset += len;
        }

        let frame = Frame {
            seq,
            base,
            base_tag,
            locals: slots,
            original_size: locals.iter().sum(),
            aligned_size: total,
        };
        self.stack.next_seq += 1;
        self.stack.sp = base;
        self.stack.frames.push(frame.clone());
        Ok(frame)
    }

    /// Pops `frame`, which must be the innermost live frame, retagging its
    /// memory with a tag none of its locals used.
    pub fn exit_frame(&mut self, frame: &Frame) -> Result<()> {
        match self.stack.frames.last() {
            Some(top) if top.seq == frame.seq => {}
            _ => {
                return Err(MtError::usage(format!(
                    "frame {} is not the innermost live frame",
                    frame.seq
                )))
            }
        }
        let live = self.stack.frames.pop().expect("checked above");
        let slot_tags: Vec<Tag> = live.locals.iter().map(|l| l.tag).collect();
        let shared = self.random_tag_excluding(&slot_tags);
        for slot in &live.locals {
            let retag = match shared {
                Some(t) => t,
                None => self
                    .random_tag_excluding(&[slot.tag])
                    .expect("at least two usable tags"),
            };
            self.shadow
                .set_tag_range(live.base + slot.offset, slot.aligned, retag)?;
        }
        self.stack.sp = live.base + live.aligned_size;
        Ok(())
    }

    /// Closes the scope of local `slot`, retagging it so the old pointer
    /// mismatches.
    pub fn end_scope(&mut self, frame: &Frame, slot: usize) -> Result<()> {
        let pos = self
            .stack
            .frames
            .iter()
            .position(|f| f.seq == frame.seq)
            .ok_or_else(|| MtError::usage(format!("frame {} is not live", frame.seq)))?;
        let live = &self.stack.frames[pos];
        let local = live
            .locals
            .get(slot)
            .ok_or_else(|| MtError::usage(format!("frame {} has no local {slot}", frame.seq)))?;
        if local.state == ScopeState::OutOfScope {
            return Err(MtError::usage(format!("local {slot} is already out of scope")));
        }
        let (start, len, tag) = (live.base + local.offset, local.aligned, local.tag);
        let [below, above] = self.neighbor_tags(start, start + len);
        let retag = self
            .random_tag_excluding(&[tag, below, above])
            .or_else(|| self.random_tag_excluding(&[tag]))
            .expect("at least two usable tags");
        self.shadow.set_tag_range(start, len, retag)?;
        self.stack.frames[pos].locals[slot].state = ScopeState::OutOfScope;
        Ok(())
    }

    /// Live frames, outermost first.
    pub fn frames(&self) -> &[Frame] {
        &self.stack.frames
    }
}
