//! Software simulator of hardware memory tagging.
//!
//! Memory is split into `tg`-byte granules, each carrying a `ts`-bit tag in a
//! shadow store; pointers carry a tag in their top bits. Every load and store
//! compares the two. On top of that the crate models a tagging heap
//! allocator, compiler-style stack frame tagging, precise and imprecise store
//! trapping, a partial-granule precision extension, and a harness measuring
//! detection probability and RAM overhead.
//!
//! ```
//! use memtag::{MtConfig, Simulator, TagPolicy};
//!
//! let mut sim = Simulator::new(MtConfig::hwasan(), 1).unwrap();
//! let p = sim.malloc(10, TagPolicy::AdjacentDistinct).unwrap();
//! sim.malloc(16, TagPolicy::AdjacentDistinct).unwrap();
//! assert!(sim.store(p.offset(12).unwrap(), &[0]).is_ok()); // same granule
//! assert!(sim.store(p.offset(16).unwrap(), &[0]).is_err()); // next granule
//! ```

pub mod access;
pub mod allocator;
pub mod cli;
pub mod error;
pub mod harness;
mod memory;
pub mod precision;
pub mod report;
mod sim;
pub mod stack;
pub mod tagspace;

pub use access::{RangeCheckError, EFAULT};
pub use allocator::{AllocatorStats, Chunk, ChunkState, TagPolicy, UNINIT_SENTINEL};
pub use error::{MtError, Result};
pub use precision::PartialGranuleMeta;
pub use report::{AccessKind, FaultKind, FaultReport, Provenance};
pub use sim::{Layout, Simulator};
pub use stack::{Frame, FrameOverhead, LocalSlot, ScopeState};
pub use tagspace::{granule_index, storage_bits, tags_match, MtConfig, ShadowStore, StoreMode, Tag, TaggedPtr};
