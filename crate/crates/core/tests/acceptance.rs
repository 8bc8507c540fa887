//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memtag::harness::{
    analyze_trace, estimate_detection, parse_trace, run_scenario, Scenario, ScenarioKind, ScenarioParams,
};
use memtag::{MtConfig, Simulator, StoreMode, Tag, TagPolicy, TaggedPtr, UNINIT_SENTINEL};

use common::{access_allowed, brute_force_peak};

const SEED: u64 = 1;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn probe_pair(tg: u64, ts: u32, target: f64, tol: f64) -> Outcome {
    let cfg = MtConfig::new(tg, ts).unwrap();
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for kind in [ScenarioKind::HeapUseAfterFree, ScenarioKind::NonLinearOverflow] {
        let r = estimate_detection(kind, &cfg, TagPolicy::Random, 100_000, SEED).map_err(|e| e.to_string())?;
        let exact = r.exact.unwrap();
        let sigma = (exact * (1.0 - exact) / r.trials as f64).sqrt();
        let z = (r.rate - exact) / sigma;
        ok &= (r.rate - target).abs() <= tol && z.abs() <= 4.0;
        details.push(format!(
            "{kind}: rate={:.4}% (target {:.3}% ± {:.1}pp, model-exact {:.4}%, z={z:+.2})",
            r.rate * 100.0,
            target * 100.0,
            tol * 100.0,
            exact * 100.0
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(10);
    details.push(format!("runtime {:.2}s (< 10s)", elapsed.as_secs_f64()));
    check(ok, details.join("; "))
}

fn ac1() -> Outcome {
    probe_pair(64, 4, 15.0 / 16.0, 0.005)
}

fn ac2() -> Outcome {
    probe_pair(16, 8, 0.99609, 0.002)
}

/// `p = malloc(10)` at tg=16 followed by a neighbor; bad offsets 0..32.
fn ac3() -> Outcome {
    let mut faults = Vec::new();
    for precision_ext in [false, true] {
        let mut cfg = MtConfig::hwasan();
        cfg.precision_ext = precision_ext;
        let mut sim = Simulator::new(cfg.clone(), SEED).unwrap();
        let p = sim.malloc(10, TagPolicy::AdjacentDistinct).unwrap();
        sim.malloc(16, TagPolicy::AdjacentDistinct).unwrap();
        let mut faulting = Vec::new();
        for offset in 0..32 {
            let q = p.offset(offset).unwrap();
            let oracle_ok = access_allowed(&sim, q, 1);
            let load_ok = sim.load(q, 1).is_ok();
            let store_ok = sim.store(q, &[0]).is_ok();
            if load_ok != oracle_ok || store_ok != oracle_ok {
                return Err(format!("offset {offset}: engine disagrees with per-byte oracle"));
            }
            if !oracle_ok {
                faulting.push(offset);
            }
        }
        faults.push(faulting);
    }
    let plain: Vec<i64> = (16..32).collect();
    let precise: Vec<i64> = (10..32).collect();
    check(
        faults[0] == plain && faults[1] == precise,
        format!(
            "precision off: p[12] {}, p[16] {}; precision on: p[12] {}; faulting offsets off={}..{} on={}..{}",
            if faults[0].contains(&12) { "detected" } else { "undetected" },
            if faults[0].contains(&16) { "detected" } else { "undetected" },
            if faults[1].contains(&12) { "detected" } else { "undetected" },
            faults[0].first().unwrap_or(&-1),
            faults[0].last().unwrap_or(&-1),
            faults[1].first().unwrap_or(&-1),
            faults[1].last().unwrap_or(&-1),
        ),
    )
}

fn ac4() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (tg, ts) in [(16, 8), (64, 4), (16, 4)] {
        let cfg = MtConfig::new(tg, ts).unwrap();
        for kind in [ScenarioKind::LinearOverflow, ScenarioKind::LinearUnderflow] {
            let r = estimate_detection(kind, &cfg, TagPolicy::AdjacentDistinct, 10_000, SEED)
                .map_err(|e| e.to_string())?;
            ok &= r.detections == r.trials;
            details.push(format!("{kind}@{tg}/{ts}={}/{}", r.detections, r.trials));
        }
    }
    check(ok, details.join(" "))
}

fn ac5() -> Outcome {
    let mut cfg = MtConfig::new(16, 4).unwrap();
    cfg.quarantine_capacity = 4096;
    let kind = ScenarioKind::HeapUseAfterFree;
    let mut hits = 0;
    for i in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        rng.set_stream(i);
        let scenario = Scenario {
            kind,
            params: ScenarioParams::sample(kind, &cfg, &mut rng),
            policy: TagPolicy::Random,
            seed: SEED + i,
            stream: 0,
        };
        let out = run_scenario(&scenario, &cfg).map_err(|e| e.to_string())?;
        if out.reused {
            return Err(format!("trial {i}: quarantined chunk was reused"));
        }
        hits += u64::from(out.detected);
    }
    check(hits == 10_000, format!("{hits}/10000 dangling accesses faulted (ts=4, quarantine 4096B)"))
}

fn ac6() -> Outcome {
    let kind = ScenarioKind::UninitializedRead;
    let mut counts = [0u64; 2];
    for (slot, zero_on_tag) in [false, true].into_iter().enumerate() {
        let mut cfg = MtConfig::hwasan();
        cfg.zero_on_tag = zero_on_tag;
        let expected = if zero_on_tag { 0 } else { UNINIT_SENTINEL };
        for i in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED);
            rng.set_stream(i);
            let scenario = Scenario {
                kind,
                params: ScenarioParams::sample(kind, &cfg, &mut rng),
                policy: TagPolicy::Random,
                seed: SEED,
                stream: i,
            };
            let out = run_scenario(&scenario, &cfg).map_err(|e| e.to_string())?;
            if out.observed.as_deref() == Some(&[expected][..]) && out.detected == zero_on_tag {
                counts[slot] += 1;
            }
        }
    }
    check(
        counts == [10_000, 10_000],
        format!("sentinel observed {}/10000 (zero-on-tag off); zero observed {}/10000 (on)", counts[0], counts[1]),
    )
}

fn ac7() -> Outcome {
    let mut cfg = MtConfig::hwasan();
    cfg.store_mode = StoreMode::ImpreciseStores;
    let mut total = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sim = Simulator::new(cfg.clone(), seed).unwrap();
        let ptrs: Vec<TaggedPtr> = (0..8)
            .map(|_| sim.malloc(rng.gen_range(1..64), TagPolicy::AdjacentDistinct).unwrap())
            .collect();
        let snapshot_base = ptrs.iter().map(|p| p.addr()).min().unwrap();
        let span = ptrs.iter().map(|p| p.addr()).max().unwrap() + 80 - snapshot_base;
        let mut expected_mem = sim.peek(snapshot_base, span);
        let mut expected_faults = Vec::new();
        let n = rng.gen_range(1..=32);
        let mut mismatched = 0;
        while mismatched < n {
            let p = ptrs[rng.gen_range(0..8)];
            let off = rng.gen_range(0..80) as i64;
            let q = p.offset(off).unwrap();
            let good = access_allowed(&sim, q, 1);
            if rng.gen_bool(0.2) {
                // loads are precise: fault now, never queued
                let queued = sim.pending_faults().len();
                if sim.load(q, 1).is_ok() != good || sim.pending_faults().len() != queued {
                    return Err(format!("seed {seed}: load was not handled precisely"));
                }
                continue;
            }
            let value = rng.gen::<u8>();
            if sim.store(q, &[value]).is_err() {
                return Err(format!("seed {seed}: imprecise store faulted immediately"));
            }
            if good {
                expected_mem[(q.addr() - snapshot_base) as usize] = value;
            } else {
                expected_faults.push(q);
                mismatched += 1;
            }
        }
        let reports = sim.sync();
        let order: Vec<TaggedPtr> = reports.iter().map(|r| r.ptr).collect();
        if order != expected_faults || !reports.iter().all(|r| r.deferred) {
            return Err(format!("seed {seed}: deferred reports out of order or miscounted"));
        }
        if sim.peek(snapshot_base, span) != expected_mem {
            return Err(format!("seed {seed}: a mismatched store modified memory"));
        }
        if !sim.sync().is_empty() {
            return Err(format!("seed {seed}: sync did not drain the queue"));
        }
        total += n;
    }
    Ok(format!(
        "200 programs, {total} mismatched stores: all deferred in program order, 0 memory mutations, loads precise"
    ))
}

fn ac8() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/traces/tiny.txt");
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let events = parse_trace(&text).map_err(|e| e.to_string())?;
    let alignments = [8, 16, 32, 64];
    let report = analyze_trace(&events, &alignments, 8).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for (row, &a) in report.rows.iter().zip(&alignments) {
        let oracle = brute_force_peak(&events, a);
        if row.alignment != a || row.peak_bytes != oracle {
            return Err(format!("alignment {a}: analyzer {} vs oracle {oracle}", row.peak_bytes));
        }
        details.push(format!("{a}:{}B/{:.2}%", row.peak_bytes, row.overhead_pct));
    }
    if report.rows[0].overhead_pct != 0.0 {
        return Err("base-8 row is not 0%".into());
    }
    if report.rows.windows(2).any(|w| w[1].peak_bytes < w[0].peak_bytes) {
        return Err("overhead not monotone in alignment".into());
    }
    let row16 = &report.rows[1];
    let fraction = row16.tag_storage_bytes / row16.peak_bytes as f64;
    for row in &report.rows {
        let want = row.peak_bytes as f64 * 8.0 / (8.0 * row.alignment as f64);
        if (row.tag_storage_bytes - want).abs() > 1e-9 {
            return Err(format!("alignment {}: tag storage {}", row.alignment, row.tag_storage_bytes));
        }
    }
    check(
        (fraction - 0.0625).abs() < 1e-12,
        format!("{}; tag storage at tg=16,ts=8 = {:.2}% of peak", details.join(" "), fraction * 100.0),
    )
}

fn ac9() -> Outcome {
    let mut details = Vec::new();

    // pack/unpack roundtrip
    let mut runner = TestRunner::new(PropConfig {
        cases: 100_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop_oneof![Just(4u32), Just(8u32)], 0u64..(1 << 56), any::<u8>());
    runner
        .run(&strategy, |(ts, addr, raw)| {
            let cfg = MtConfig::new(16, ts).unwrap();
            let tag = cfg.tag((u64::from(raw) % cfg.tag_count() as u64) as u8).unwrap();
            let p = TaggedPtr::pack(addr, tag, &cfg).unwrap();
            prop_assert_eq!(p.unpack(&cfg), (addr, tag));
            prop_assert_eq!(TaggedPtr::from_word(p.word(), &cfg).unwrap(), p);
            Ok(())
        })
        .map_err(|e| format!("roundtrip: {e}"))?;
    details.push("roundtrip 100000 cases".to_owned());

    // shadow granularity isolation
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop_oneof![Just(16u64), Just(32), Just(64)], 64u64..(1 << 40), 1u8..=15);
    runner
        .run(&strategy, |(tg, addr, raw)| {
            let cfg = MtConfig::new(tg, 4).unwrap();
            let mut sim = Simulator::new(cfg.clone(), 0).unwrap();
            let granule = addr - addr % tg;
            sim.set_tag_range(granule, tg, cfg.tag(raw).unwrap()).unwrap();
            for a in granule..granule + tg {
                prop_assert_eq!(sim.get_tag(a).value(), raw);
            }
            prop_assert_eq!(sim.get_tag(granule - 1), Tag::UNTAGGED);
            prop_assert_eq!(sim.get_tag(granule + tg), Tag::UNTAGGED);
            Ok(())
        })
        .map_err(|e| format!("shadow isolation: {e}"))?;
    details.push("shadow isolation 10000 cases".to_owned());

    // access engine vs per-byte oracle
    let mut accesses = 0;
    for seed in 0..20u64 {
        let mut cfg = MtConfig::new([16, 32, 64][seed as usize % 3], [4, 8][seed as usize % 2]).unwrap();
        cfg.precision_ext = seed % 4 < 2;
        let mut sim = Simulator::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut live = Vec::new();
        let mut ptrs = Vec::new();
        for _ in 0..40 {
            let p = sim.malloc(rng.gen_range(0..3 * cfg.tg), TagPolicy::Random).unwrap();
            live.push(p);
            ptrs.push(p);
            if rng.gen_bool(0.3) {
                let victim = live.swap_remove(rng.gen_range(0..live.len()));
                sim.free(victim).unwrap();
            }
        }
        for _ in 0..600 {
            let base = ptrs[rng.gen_range(0..ptrs.len())];
            let width = [1usize, 2, 4, 8][rng.gen_range(0..4)];
            let q = base.offset(rng.gen_range(-(cfg.tg as i64)..4 * cfg.tg as i64)).unwrap();
            let expected = access_allowed(&sim, q, width as u64);
            if sim.load(q, width).is_ok() != expected {
                return Err(format!("seed {seed}: load decision at {q} differs from oracle"));
            }
            if sim.check_user_range(q, width as u64).is_ok() != expected {
                return Err(format!("seed {seed}: range check at {q} differs from oracle"));
            }
            accesses += 1;
        }
    }
    details.push(format!("oracle equivalence {accesses} accesses"));

    // use-after-return over all seeds at ts=4
    let cfg = MtConfig::new(16, 4).unwrap();
    let mut frames = 0;
    for seed in 0..4096u64 {
        let mut sim = Simulator::new(cfg.clone(), seed).unwrap();
        let outer = sim.enter_frame(&[8]).unwrap();
        let locals: Vec<u64> = (0..=(seed % 6)).map(|i| 1 + (seed + i * 7) % 40).collect();
        let f = sim.enter_frame(&locals).unwrap();
        let saved: Vec<TaggedPtr> = (0..locals.len()).map(|i| f.local_ptr(i, &cfg).unwrap()).collect();
        sim.exit_frame(&f).unwrap();
        for p in &saved {
            if sim.load(*p, 1).is_ok() {
                return Err(format!("seed {seed}: use-after-return not detected"));
            }
        }
        sim.exit_frame(&outer).unwrap();
        frames += 1;
    }
    details.push(format!("use-after-return detected for all {frames} seeds"));
    Ok(details.join("; "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "detection probability ts=4 (tg=64)", ac1),
        ("AC2", "detection probability ts=8 (tg=16)", ac2),
        ("AC3", "malloc(10) precision example, offsets 0..31", ac3),
        ("AC4", "adjacent-distinct linear overflow/underflow", ac4),
        ("AC5", "quarantine determinism", ac5),
        ("AC6", "zero-on-tag mitigation", ac6),
        ("AC7", "imprecise store trap mode", ac7),
        ("AC8", "overhead methodology", ac8),
        ("AC9", "property suites", ac9),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
