//! Independent oracles shared by the integration tests. Nothing here goes
//! through the access engine or the trace analyzer.

#![allow(dead_code)]

use std::collections::HashMap;

use memtag::harness::TraceEvent;
use memtag::{Simulator, Tag, TaggedPtr};

/// Per-byte tag check read straight from the shadow store and the granule
/// metadata bytes.
pub fn byte_allowed(sim: &Simulator, ptr_tag: Tag, addr: u64) -> bool {
    let cfg = sim.cfg();
    let mem_tag = sim.get_tag(addr);
    if cfg.partial_tag() == Some(mem_tag) {
        let granule = addr - addr % cfg.tg;
        let meta = sim.peek(granule + cfg.tg - 2, 2);
        let (n, real) = (u64::from(meta[0]), meta[1]);
        return ptr_tag.value() == real && addr - granule < n;
    }
    mem_tag.value() == 0 || mem_tag == ptr_tag
}

pub fn access_allowed(sim: &Simulator, p: TaggedPtr, len: u64) -> bool {
    let tag = p.tag(sim.cfg());
    (p.addr()..p.addr() + len).all(|a| byte_allowed(sim, tag, a))
}

/// Peak live bytes recomputed from scratch after every event.
pub fn brute_force_peak(events: &[TraceEvent], alignment: u64) -> u64 {
    let mut peak = 0;
    for i in 0..events.len() {
        let mut live: HashMap<u64, u64> = HashMap::new();
        for e in &events[..=i] {
            match *e {
                TraceEvent::Alloc { id, size } => {
                    live.insert(id, size);
                }
                TraceEvent::Free { id } => {
                    live.remove(&id);
                }
            }
        }
        let total: u64 = live
            .values()
            .map(|&s| {
                let s = s.max(1);
                let mut r = alignment;
                while r < s {
                    r += alignment;
                }
                r
            })
            .sum();
        peak = peak.max(total);
    }
    peak
}

/// Fraction of ordered pairs `(a, b)` from `left x right` with `a != b`.
pub fn distinct_pair_fraction(left: &[u8], right: &[u8]) -> f64 {
    let total = left.len() * right.len();
    let distinct = left
        .iter()
        .flat_map(|a| right.iter().map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
        .count();
    distinct as f64 / total as f64
}
