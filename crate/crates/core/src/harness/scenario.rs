//! Bug-scenario corpus.
//!
//! Each scenario sets up objects on a fresh simulator, performs exactly one
//! buggy access, and reports whether that access was caught. A fault at any
//! other step is a harness bug and is returned as an error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use super::HarnessError;
use crate::allocator::{TagPolicy, UNINIT_SENTINEL};
use crate::error::MtError;
use crate::report::FaultReport;
use crate::sim::Simulator;
use crate::tagspace::{MtConfig, TaggedPtr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    HeapUseAfterFree,
    LinearOverflow,
    LinearUnderflow,
    NonLinearOverflow,
    IntraGranuleOverflow,
    UseAfterReturn,
    UseAfterScope,
    UninitializedRead,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::HeapUseAfterFree,
        ScenarioKind::LinearOverflow,
        ScenarioKind::LinearUnderflow,
        ScenarioKind::NonLinearOverflow,
        ScenarioKind::IntraGranuleOverflow,
        ScenarioKind::UseAfterReturn,
        ScenarioKind::UseAfterScope,
        ScenarioKind::UninitializedRead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::HeapUseAfterFree => "heap-use-after-free",
            ScenarioKind::LinearOverflow => "linear-overflow",
            ScenarioKind::LinearUnderflow => "linear-underflow",
            ScenarioKind::NonLinearOverflow => "non-linear-overflow",
            ScenarioKind::IntraGranuleOverflow => "intra-granule",
            ScenarioKind::UseAfterReturn => "use-after-return",
            ScenarioKind::UseAfterScope => "use-after-scope",
            ScenarioKind::UninitializedRead => "uninitialized-read",
        }
    }

    fn is_stack(self) -> bool {
        matches!(self, ScenarioKind::UseAfterReturn | ScenarioKind::UseAfterScope)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "intra-granule-overflow" {
            return Ok(ScenarioKind::IntraGranuleOverflow);
        }
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Params(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BugAccess {
    Load,
    Store,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioParams {
    /// Heap objects allocated in order, or the locals of the stack frame.
    pub sizes: Vec<u64>,
    /// Index of the object whose pointer performs the bad access.
    pub target: usize,
    /// Bad access offset from the target pointer; `None` picks the first
    /// byte of the neighboring (or victim) object, 0 for temporal bugs.
    pub offset: Option<i64>,
    /// Use-after-free: same-size allocations between free and access.
    /// Use-after-return: re-entries of the same frame before the access.
    pub reuse_depth: u32,
    pub access: BugAccess,
}

impl ScenarioParams {
    /// The fixed example parameters for `kind`.
    pub fn example(kind: ScenarioKind, cfg: &MtConfig) -> Self {
        let tg = cfg.tg;
        let (sizes, target, offset, reuse_depth, access) = match kind {
            ScenarioKind::HeapUseAfterFree => (vec![32], 0, None, 1, BugAccess::Load),
            ScenarioKind::LinearOverflow => (vec![10, 16], 0, None, 0, BugAccess::Store),
            ScenarioKind::LinearUnderflow => (vec![16, 10], 1, None, 0, BugAccess::Store),
            ScenarioKind::NonLinearOverflow => (vec![32, tg, tg, tg, 32], 0, None, 0, BugAccess::Store),
            ScenarioKind::IntraGranuleOverflow => (vec![10, 16], 0, Some(12), 0, BugAccess::Store),
            ScenarioKind::UseAfterReturn => (vec![10, 20], 0, None, 0, BugAccess::Load),
            ScenarioKind::UseAfterScope => (vec![10, 20], 0, None, 0, BugAccess::Load),
            ScenarioKind::UninitializedRead => (vec![32], 0, Some(0), 0, BugAccess::Load),
        };
        ScenarioParams {
            sizes,
            target,
            offset,
            reuse_depth,
            access,
        }
    }

    /// Randomized parameters for Monte-Carlo trials.
    pub fn sample<R: Rng>(kind: ScenarioKind, cfg: &MtConfig, rng: &mut R) -> Self {
        let tg = cfg.tg;
        let size = |rng: &mut R| rng.gen_range(1..=4 * tg);
        match kind {
            ScenarioKind::HeapUseAfterFree => {
                let quarantined = cfg.quarantine_capacity >= tg;
                let max = if quarantined {
                    (4 * tg).min(cfg.quarantine_capacity)
                } else {
                    4 * tg
                };
                let s = rng.gen_range(1..=max);
                ScenarioParams {
                    sizes: vec![s],
                    target: 0,
                    offset: Some(rng.gen_range(0..s) as i64),
                    reuse_depth: if quarantined { rng.gen_range(1..=4) } else { 1 },
                    access: BugAccess::Load,
                }
            }
            ScenarioKind::LinearOverflow | ScenarioKind::LinearUnderflow => {
                let n = rng.gen_range(2..=8);
                let sizes: Vec<u64> = (0..n).map(|_| size(rng)).collect();
                let target = if kind == ScenarioKind::LinearOverflow {
                    rng.gen_range(0..n - 1)
                } else {
                    rng.gen_range(1..n)
                };
                ScenarioParams {
                    sizes,
                    target,
                    offset: None,
                    reuse_depth: 0,
                    access: BugAccess::Store,
                }
            }
            ScenarioKind::NonLinearOverflow => {
                let n = rng.gen_range(4..=8);
                ScenarioParams {
                    sizes: (0..n).map(|_| size(rng)).collect(),
                    target: rng.gen_range(0..n - 3),
                    offset: None,
                    reuse_depth: 0,
                    access: BugAccess::Store,
                }
            }
            ScenarioKind::IntraGranuleOverflow => {
                // tails short enough for the partial-granule metadata
                let granules = rng.gen_range(0..4);
                let s = granules * tg + rng.gen_range(1..=tg - 2);
                let aligned = cfg.round_up(s);
                ScenarioParams {
                    sizes: vec![s, size(rng)],
                    target: 0,
                    offset: Some(rng.gen_range(s..aligned) as i64),
                    reuse_depth: 0,
                    access: BugAccess::Store,
                }
            }
            ScenarioKind::UseAfterReturn | ScenarioKind::UseAfterScope => {
                let n = rng.gen_range(1..=4);
                let sizes: Vec<u64> = (0..n).map(|_| size(rng)).collect();
                let target = rng.gen_range(0..n);
                let offset = Some(rng.gen_range(0..sizes[target]) as i64);
                ScenarioParams {
                    sizes,
                    target,
                    offset,
                    reuse_depth: 0,
                    access: BugAccess::Load,
                }
            }
            ScenarioKind::UninitializedRead => {
                let s = size(rng);
                ScenarioParams {
                    sizes: vec![s],
                    target: 0,
                    offset: Some(rng.gen_range(0..s) as i64),
                    reuse_depth: 0,
                    access: BugAccess::Load,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub policy: TagPolicy,
    pub seed: u64,
    /// Random stream of `seed` used by the simulator.
    pub stream: u64,
}

impl Scenario {
    pub fn example(kind: ScenarioKind, cfg: &MtConfig, policy: TagPolicy, seed: u64) -> Self {
        Scenario {
            kind,
            params: ScenarioParams::example(kind, cfg),
            policy,
            seed,
            stream: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    /// The bad access was caught, or for uninitialized reads, the read
    /// returned zeroed memory.
    pub detected: bool,
    pub report: Option<FaultReport>,
    /// Bytes returned by the bad access when it was not caught.
    pub observed: Option<Vec<u8>>,
    /// Whether a use-after-free or use-after-return target was reused
    /// before the access.
    pub reused: bool,
    /// Human-readable trace of the steps taken.
    pub log: Vec<String>,
}

struct Run<'a> {
    sim: Simulator,
    log: &'a mut Vec<String>,
}

impl Run<'_> {
    fn step<T>(&mut self, step: &'static str, f: impl FnOnce(&mut Simulator) -> Result<T, MtError>) -> Result<T, HarnessError> {
        f(&mut self.sim).map_err(|source| HarnessError::Setup { step, source })
    }

    fn malloc(&mut self, size: u64, policy: TagPolicy) -> Result<TaggedPtr, HarnessError> {
        let p = self.step("malloc", |s| s.malloc(size, policy))?;
        self.log.push(format!("malloc({size}) = {p}"));
        Ok(p)
    }

    /// Chunk bounds `(base, end)` of a live pointer.
    fn bounds(&self, p: TaggedPtr) -> (u64, u64) {
        let c = self.sim.chunk_at(p.addr()).expect("pointer from malloc");
        (c.base, c.end())
    }
}

fn params_error(msg: impl Into<String>) -> HarnessError {
    HarnessError::Params(msg.into())
}

fn validate(s: &Scenario, cfg: &MtConfig) -> Result<(), HarnessError> {
    let p = &s.params;
    if p.sizes.is_empty() || p.target >= p.sizes.len() {
        return Err(params_error("target must index into a non-empty size list"));
    }
    let target_size = p.sizes[p.target].max(1);
    match s.kind {
        ScenarioKind::LinearOverflow if p.target + 1 >= p.sizes.len() => {
            Err(params_error("linear overflow needs an object after the target"))
        }
        ScenarioKind::LinearUnderflow if p.target == 0 => {
            Err(params_error("linear underflow needs an object before the target"))
        }
        ScenarioKind::NonLinearOverflow if p.target + 2 >= p.sizes.len() => Err(params_error(
            "non-linear overflow needs a victim at least two objects past the target",
        )),
        ScenarioKind::IntraGranuleOverflow => {
            let offset = p.offset.unwrap_or(target_size as i64);
            if target_size.is_multiple_of(cfg.tg) {
                Err(params_error("intra-granule overflow needs a size that is not a granule multiple"))
            } else if offset < target_size as i64 || offset >= cfg.round_up(target_size) as i64 {
                Err(params_error(format!(
                    "offset {offset} is not in the slack [{target_size}, {})",
                    cfg.round_up(target_size)
                )))
            } else if p.target + 1 >= p.sizes.len() {
                Err(params_error("intra-granule overflow needs a neighbor after the target"))
            } else {
                Ok(())
            }
        }
        ScenarioKind::HeapUseAfterFree
        | ScenarioKind::UseAfterReturn
        | ScenarioKind::UseAfterScope
        | ScenarioKind::UninitializedRead => match p.offset {
            Some(o) if o < 0 || o as u64 >= target_size => Err(params_error(format!(
                "offset {o} is outside the {target_size}-byte object"
            ))),
            _ => Ok(()),
        },
        _ => Ok(()),
    }
}

/// Runs `s` on a fresh simulator configured with `cfg`.
pub fn run_scenario(s: &Scenario, cfg: &MtConfig) -> Result<ScenarioOutcome, HarnessError> {
    validate(s, cfg)?;
    let sim = Simulator::with_stream(cfg.clone(), s.seed, s.stream).map_err(HarnessError::Config)?;
    let mut log = Vec::new();
    let mut run = Run { sim, log: &mut log };
    let p = &s.params;
    let mut reused = false;
    // tagged and untagged chunks recycle separate free lists
    let sampled = matches!(s.policy, TagPolicy::Sampled { .. });

    let bug_ptr = if s.kind.is_stack() {
        let frame = run.step("enter_frame", |sim| sim.enter_frame(&p.sizes))?;
        run.log.push(format!("enter_frame({:?}) base=0x{:x}", p.sizes, frame.base));
        let local = run.step("local_ptr", |sim| frame.local_ptr(p.target, sim.cfg()))?;
        run.step("store", |sim| sim.store(local, &[0x5A]))?;
        let bug = run.step("offset", |_| local.offset(p.offset.unwrap_or(0)))?;
        if s.kind == ScenarioKind::UseAfterScope {
            run.step("end_scope", |sim| sim.end_scope(&frame, p.target))?;
            run.log.push(format!("end_scope(local {})", p.target));
        } else {
            run.step("exit_frame", |sim| sim.exit_frame(&frame))?;
            run.log.push("exit_frame".to_owned());
            for depth in 0..p.reuse_depth {
                let again = run.step("enter_frame", |sim| sim.enter_frame(&p.sizes))?;
                reused |= again.base == frame.base;
                run.log.push(format!("enter_frame({:?}) base=0x{:x}", p.sizes, again.base));
                if depth + 1 < p.reuse_depth {
                    run.step("exit_frame", |sim| sim.exit_frame(&again))?;
                }
            }
        }
        bug
    } else {
        let mut ptrs = Vec::with_capacity(p.sizes.len());
        for &size in &p.sizes {
            ptrs.push(run.malloc(size, s.policy)?);
        }
        let target = ptrs[p.target];
        let (base, end) = run.bounds(target);
        let offset = match (s.kind, p.offset) {
            (_, Some(o)) => o,
            (ScenarioKind::LinearOverflow, None) => (end - target.addr()) as i64,
            (ScenarioKind::LinearUnderflow, None) => base as i64 - target.addr() as i64 - 1,
            (ScenarioKind::NonLinearOverflow, None) => {
                let victim = ptrs[p.sizes.len() - 1];
                victim.addr() as i64 - target.addr() as i64
            }
            (_, None) => 0,
        };
        match s.kind {
            ScenarioKind::HeapUseAfterFree => {
                run.step("store", |sim| sim.store(target, &[0x5A]))?;
                run.step("free", |sim| sim.free(target))?;
                run.log.push(format!("free({target})"));
                for _ in 0..p.reuse_depth {
                    let q = run.malloc(p.sizes[p.target], s.policy)?;
                    reused |= q.addr() == target.addr();
                }
                if cfg.quarantine_capacity == 0 && p.reuse_depth > 0 && !reused && !sampled {
                    return Err(HarnessError::Setup {
                        step: "reuse",
                        source: MtError::Usage("freed chunk was not reused".to_owned()),
                    });
                }
            }
            ScenarioKind::UninitializedRead => {
                let size = p.sizes[p.target].max(1);
                for i in 0..size {
                    let byte = run.step("offset", |_| target.offset(i as i64))?;
                    run.step("store", |sim| sim.store(byte, &[0x5A]))?;
                }
                run.step("free", |sim| sim.free(target))?;
                run.step("quarantine_flush", |sim| Ok(sim.quarantine_flush()))?;
                let fresh = run.malloc(size, s.policy)?;
                if fresh.addr() != target.addr() && !sampled {
                    return Err(HarnessError::Setup {
                        step: "reuse",
                        source: MtError::Usage("freed chunk was not reused".to_owned()),
                    });
                }
                let at = run.step("offset", |_| fresh.offset(offset))?;
                let bytes = run.step("load", |sim| sim.load(at, 1))?;
                run.log.push(format!("load({at}) = {bytes:02x?}"));
                let detected = bytes.iter().all(|b| *b == 0);
                debug_assert!(detected || bytes.iter().all(|b| *b == UNINIT_SENTINEL));
                return Ok(ScenarioOutcome {
                    detected,
                    report: None,
                    observed: Some(bytes),
                    reused: fresh.addr() == target.addr(),
                    log,
                });
            }
            _ => {}
        }
        run.step("offset", |_| target.offset(offset))?
    };

    // the injected bug
    let result = match p.access {
        BugAccess::Load => run.sim.load(bug_ptr, 1).map(Some),
        BugAccess::Store => run.sim.store(bug_ptr, &[0]).map(|()| None),
    };
    let verb = match p.access {
        BugAccess::Load => "load",
        BugAccess::Store => "store",
    };
    run.log.push(format!("bug: {verb} {bug_ptr}"));
    let (mut report, observed) = match result {
        Ok(bytes) => (None, bytes),
        Err(MtError::Fault(f)) => (Some(*f), None),
        Err(source) => return Err(HarnessError::Setup { step: "bug access", source }),
    };
    let deferred = run.sim.sync();
    if let Some(extra) = deferred.iter().find(|r| r.ptr != bug_ptr) {
        return Err(HarnessError::Setup {
            step: "sync",
            source: MtError::from(extra.clone()),
        });
    }
    if report.is_none() {
        report = deferred.into_iter().next();
    }
    if let Some(r) = &report {
        run.log.push(r.to_plain());
    }
    Ok(ScenarioOutcome {
        detected: report.is_some(),
        report,
        observed,
        reused,
        log,
    })
}
