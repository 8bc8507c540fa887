//! Command-line front end: `probe`, `simulate` and `overhead`.
//!
//! Exit codes: 0 on success, 1 when `simulate` caught the injected bug with
//! a fault, 2 on usage or input errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::allocator::TagPolicy;
use crate::harness::{
    analyze_trace, estimate_detection, parse_trace, run_scenario, ConfigEcho, HarnessError, Scenario, ScenarioKind,
};
use crate::tagspace::{MtConfig, StoreMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DETECTED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "memtag", version, about = "Memory tagging simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate detection rates over a scenario-kind by configuration matrix.
    Probe(ProbeArgs),
    /// Run one scenario verbosely; exits 1 if the bug faulted.
    Simulate(SimulateArgs),
    /// Heap over-alignment overhead of an allocation trace.
    Overhead(OverheadArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Random,
    AdjacentDistinct,
    Sampled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StoreModeArg {
    Precise,
    Imprecise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Plain,
    Json,
}

#[derive(Args, Debug)]
struct ModeArgs {
    #[arg(long, value_enum, default_value = "random")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    precision_ext: bool,
    #[arg(long)]
    zero_on_tag: bool,
    #[arg(long)]
    right_align: bool,
    #[arg(long, value_enum, default_value = "precise")]
    store_mode: StoreModeArg,
    /// Quarantine capacity in bytes.
    #[arg(long, default_value_t = 0)]
    quarantine: u64,
    /// Fraction of allocations tagged under `--policy sampled`.
    #[arg(long, default_value_t = 1.0)]
    sampling_rate: f64,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

impl ModeArgs {
    fn config(&self, tg: u64, ts: u32) -> Result<MtConfig, HarnessError> {
        let mut cfg = MtConfig::new(tg, ts).map_err(HarnessError::Config)?;
        cfg.precision_ext = self.precision_ext;
        cfg.zero_on_tag = self.zero_on_tag;
        cfg.right_align = self.right_align;
        cfg.store_mode = match self.store_mode {
            StoreModeArg::Precise => StoreMode::Precise,
            StoreModeArg::Imprecise => StoreMode::ImpreciseStores,
        };
        cfg.quarantine_capacity = self.quarantine;
        cfg.sampling_rate = self.sampling_rate;
        cfg.validate().map_err(HarnessError::Config)?;
        Ok(cfg)
    }

    fn policy(&self) -> TagPolicy {
        match self.policy {
            PolicyArg::Random => TagPolicy::Random,
            PolicyArg::AdjacentDistinct => TagPolicy::AdjacentDistinct,
            PolicyArg::Sampled => TagPolicy::Sampled {
                rate: self.sampling_rate,
            },
        }
    }
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Granule sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    tg: Vec<u64>,
    /// Tag sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    ts: Vec<u32>,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    /// Scenario kinds, comma separated; all kinds when omitted.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario kind, e.g. `intra-granule` or `heap-use-after-free`.
    scenario: String,
    #[arg(long, default_value_t = 16)]
    tg: u64,
    #[arg(long, default_value_t = 8)]
    ts: u32,
    /// Size of the target object.
    #[arg(long)]
    size: Option<u64>,
    /// Offset of the bad access from the target pointer.
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<i64>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct OverheadArgs {
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    alignments: Vec<u64>,
    /// Tag size in bits used for the tag-storage column.
    #[arg(long, default_value_t = 8)]
    ts: u32,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

/// Runs the CLI on `args` (including the program name), writing results to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn cli_main<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Probe(args) => probe(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Overhead(args) => overhead(&args),
    };
    match result {
        Ok((text, code)) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_USAGE;
            }
            code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn probe(args: &ProbeArgs) -> Result<(String, i32), HarnessError> {
    let kinds = if args.kinds.is_empty() {
        ScenarioKind::ALL.to_vec()
    } else {
        args.kinds
            .iter()
            .map(|k| k.parse())
            .collect::<Result<Vec<ScenarioKind>, _>>()?
    };
    let policy = args.mode.policy();
    let mut reports = Vec::new();
    for &tg in &args.tg {
        for &ts in &args.ts {
            let cfg = args.mode.config(tg, ts)?;
            for &kind in &kinds {
                reports.push(estimate_detection(kind, &cfg, policy, args.trials, args.mode.seed)?);
            }
        }
    }
    let text = match args.mode.format.unwrap_or(Format::Json) {
        Format::Json => serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n",
        Format::Plain => {
            let mut s = String::new();
            for r in &reports {
                let fmt_rate = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.6}"));
                let _ = writeln!(
                    s,
                    "{:<20} tg={:<2} ts={} policy={} trials={} detections={} rate={:.6} theoretical={} exact={}",
                    r.kind,
                    r.config.tg,
                    r.config.ts,
                    r.config.policy,
                    r.trials,
                    r.detections,
                    r.rate,
                    fmt_rate(r.theoretical),
                    fmt_rate(r.exact)
                );
            }
            s
        }
    };
    Ok((text, EXIT_OK))
}

fn simulate(args: &SimulateArgs) -> Result<(String, i32), HarnessError> {
    let kind: ScenarioKind = args.scenario.parse()?;
    let cfg = args.mode.config(args.tg, args.ts)?;
    let policy = args.mode.policy();
    let mut scenario = Scenario::example(kind, &cfg, policy, args.mode.seed);
    if let Some(size) = args.size {
        let target = scenario.params.target;
        scenario.params.sizes[target] = size;
    }
    if args.offset.is_some() {
        scenario.params.offset = args.offset;
    }
    let outcome = run_scenario(&scenario, &cfg)?;
    let faulted = outcome.report.is_some();
    let text = match args.mode.format.unwrap_or(Format::Plain) {
        Format::Json => {
            let value = json!({
                "scenario": kind,
                "params": scenario.params,
                "detected": outcome.detected,
                "fault": outcome.report.as_ref().map(|r| r.to_json()),
                "observed": outcome.observed,
                "reused": outcome.reused,
                "config": ConfigEcho::new(&cfg, policy, args.mode.seed),
                "log": outcome.log,
            });
            serde_json::to_string_pretty(&value).expect("outcome serializes") + "\n"
        }
        Format::Plain => {
            let mut s = format!(
                "scenario {kind} tg={} ts={} policy={policy} store-mode={} precision-ext={} seed={}\n",
                cfg.tg, cfg.ts, cfg.store_mode, cfg.precision_ext, args.mode.seed
            );
            for line in &outcome.log {
                let _ = writeln!(s, "  {line}");
            }
            let _ = writeln!(s, "detected: {}", if outcome.detected { "yes" } else { "no" });
            s
        }
    };
    Ok((text, if faulted { EXIT_DETECTED } else { EXIT_OK }))
}

fn overhead(args: &OverheadArgs) -> Result<(String, i32), HarnessError> {
    if !matches!(args.ts, 4 | 8) {
        return Err(HarnessError::Input(format!("tag size must be 4 or 8 bits, got {}", args.ts)));
    }
    let text = std::fs::read_to_string(&args.trace)
        .map_err(|e| HarnessError::Input(format!("{}: {e}", args.trace.display())))?;
    let events = parse_trace(&text)?;
    let report = analyze_trace(&events, &args.alignments, args.ts)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        Format::Plain => {
            let mut s = format!("base (8-byte) peak: {} bytes, ts={}\n", report.base_peak_bytes, report.ts);
            let _ = writeln!(s, "{:>9} {:>12} {:>10} {:>12}", "alignment", "peak_bytes", "overhead%", "tag_bytes");
            for row in &report.rows {
                let _ = writeln!(
                    s,
                    "{:>9} {:>12} {:>10.2} {:>12.2}",
                    row.alignment, row.peak_bytes, row.overhead_pct, row.tag_storage_bytes
                );
            }
            s
        }
    };
    Ok((text, EXIT_OK))
}
