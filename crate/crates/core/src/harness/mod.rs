//! Scenario corpus, Monte-Carlo detection estimator and RAM-overhead trace
//! analyzer.

mod estimate;
mod scenario;
mod trace;

use thiserror::Error;

use crate::error::MtError;

pub use estimate::{estimate_detection, ConfigEcho, DetectionReport};
pub use scenario::{run_scenario, BugAccess, Scenario, ScenarioKind, ScenarioOutcome, ScenarioParams};
pub use trace::{analyze_trace, parse_trace, OverheadReport, OverheadRow, TraceEvent};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("malformed scenario: {0}")]
    Params(String),
    #[error("invalid configuration: {0}")]
    Config(#[source] MtError),
    /// A fault or error at a step other than the injected bug.
    #[error("harness bug: unexpected failure at `{step}`: {source}")]
    Setup {
        step: &'static str,
        #[source]
        source: MtError,
    },
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("{0}")]
    Input(String),
}
