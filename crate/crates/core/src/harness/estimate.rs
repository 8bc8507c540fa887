use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{run_scenario, Scenario, ScenarioKind, ScenarioParams};
use super::HarnessError;
use crate::allocator::TagPolicy;
use crate::tagspace::{MtConfig, StoreMode};

/// Keeps the parameter stream of a trial apart from its simulator stream.
const PARAM_SALT: u64 = 0x5CE7_A210_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub tg: u64,
    pub ts: u32,
    pub policy: String,
    pub store_mode: StoreMode,
    pub precision_ext: bool,
    pub zero_on_tag: bool,
    pub right_align: bool,
    pub quarantine: u64,
    pub sampling_rate: f64,
    pub seed: u64,
}

impl ConfigEcho {
    pub fn new(cfg: &MtConfig, policy: TagPolicy, seed: u64) -> Self {
        ConfigEcho {
            tg: cfg.tg,
            ts: cfg.ts,
            policy: policy.to_string(),
            store_mode: cfg.store_mode,
            precision_ext: cfg.precision_ext,
            zero_on_tag: cfg.zero_on_tag,
            right_align: cfg.right_align,
            quarantine: cfg.quarantine_capacity,
            sampling_rate: cfg.sampling_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub kind: ScenarioKind,
    pub trials: u64,
    pub detections: u64,
    pub rate: f64,
    /// `(2^ts - 1) / 2^ts` for tag-collision-bound scenarios, 1 or 0 for
    /// scenarios the configuration makes deterministic.
    pub theoretical: Option<f64>,
    /// Rate implied by the simulator's own tag draw: collisions happen with
    /// probability `1 / u` over the `u` non-reserved tags.
    pub exact: Option<f64>,
    pub config: ConfigEcho,
}

/// Expected `(theoretical, exact)` detection rates for randomized trials of
/// `kind`, where the model predicts one.
pub fn expected_rates(kind: ScenarioKind, cfg: &MtConfig, policy: TagPolicy) -> (Option<f64>, Option<f64>) {
    let u = f64::from(cfg.usable_count());
    let collision = (Some(cfg.theoretical_detection()), Some((u - 1.0) / u));
    let certain = (Some(1.0), Some(1.0));
    let never = (Some(0.0), Some(0.0));
    let sampled = matches!(policy, TagPolicy::Sampled { .. });
    let adjacent = policy == TagPolicy::AdjacentDistinct;
    match kind {
        ScenarioKind::UseAfterReturn | ScenarioKind::UseAfterScope => certain,
        ScenarioKind::UninitializedRead if cfg.zero_on_tag => certain,
        ScenarioKind::UninitializedRead => never,
        _ if sampled => (None, None),
        ScenarioKind::HeapUseAfterFree if cfg.quarantine_capacity >= cfg.tg => certain,
        ScenarioKind::HeapUseAfterFree => collision,
        ScenarioKind::LinearOverflow | ScenarioKind::LinearUnderflow if adjacent => certain,
        // an underflow lands on the metadata byte of a partial predecessor
        ScenarioKind::LinearUnderflow if cfg.precision_ext => (collision.0, None),
        ScenarioKind::LinearOverflow | ScenarioKind::LinearUnderflow => collision,
        ScenarioKind::NonLinearOverflow if adjacent => (collision.0, None),
        ScenarioKind::NonLinearOverflow => collision,
        ScenarioKind::IntraGranuleOverflow if cfg.precision_ext => certain,
        ScenarioKind::IntraGranuleOverflow if cfg.right_align && adjacent => certain,
        ScenarioKind::IntraGranuleOverflow if cfg.right_align => collision,
        ScenarioKind::IntraGranuleOverflow => never,
    }
}

/// Runs `trials` randomized, independently seeded instances of `kind`.
///
/// Trial `i` draws its parameters and its tags from streams indexed by `i`,
/// so the result does not depend on how trials are scheduled.
pub fn estimate_detection(
    kind: ScenarioKind,
    cfg: &MtConfig,
    policy: TagPolicy,
    trials: u64,
    seed: u64,
) -> Result<DetectionReport, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Params("at least one trial is required".to_owned()));
    }
    cfg.validate().map_err(HarnessError::Config)?;
    let detections = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut params_rng = ChaCha8Rng::seed_from_u64(seed ^ PARAM_SALT);
            params_rng.set_stream(i);
            let scenario = Scenario {
                kind,
                params: ScenarioParams::sample(kind, cfg, &mut params_rng),
                policy,
                seed,
                stream: i,
            };
            run_scenario(&scenario, cfg).map(|o| u64::from(o.detected))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let (theoretical, exact) = expected_rates(kind, cfg, policy);
    Ok(DetectionReport {
        kind,
        trials,
        detections,
        rate: detections as f64 / trials as f64,
        theoretical,
        exact,
        config: ConfigEcho::new(cfg, policy, seed),
    })
}
