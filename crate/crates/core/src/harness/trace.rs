//! Heap over-alignment overhead from allocation traces.
//!
//! Trace grammar, one event per line, decimal integers:
//!
//! ```text
//! a <id> <size>
//! f <id>
//! # comment
//! ```

use std::collections::HashMap;

use serde::Serialize;

use super::HarnessError;

/// Alignment every overhead figure is measured against.
pub const BASE_ALIGNMENT: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Alloc { id: u64, size: u64 },
    Free { id: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadRow {
    pub alignment: u64,
    pub peak_bytes: u64,
    /// Peak increase over the 8-byte-aligned peak, in percent.
    pub overhead_pct: f64,
    /// `peak_bytes * ts / (8 * alignment)`.
    pub tag_storage_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub ts: u32,
    pub base_peak_bytes: u64,
    pub rows: Vec<OverheadRow>,
}

fn number(field: Option<&str>, line: usize, what: &str) -> Result<u64, HarnessError> {
    let field = field.ok_or_else(|| HarnessError::Trace {
        line,
        msg: format!("missing {what}"),
    })?;
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(HarnessError::Trace {
            line,
            msg: format!("{what} `{field}` is not a decimal integer"),
        });
    }
    field.parse().map_err(|_| HarnessError::Trace {
        line,
        msg: format!("{what} `{field}` is out of range"),
    })
}

/// Parses a trace, rejecting malformed lines and frees of ids that are not
/// live.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, HarnessError> {
    let mut events = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut fields = raw.split(' ');
        let event = match fields.next() {
            Some("a") => TraceEvent::Alloc {
                id: number(fields.next(), line, "id")?,
                size: number(fields.next(), line, "size")?,
            },
            Some("f") => TraceEvent::Free {
                id: number(fields.next(), line, "id")?,
            },
            _ => {
                return Err(HarnessError::Trace {
                    line,
                    msg: format!("unrecognized event `{raw}`"),
                })
            }
        };
        if fields.next().is_some() {
            return Err(HarnessError::Trace {
                line,
                msg: "trailing fields".to_owned(),
            });
        }
        events.push(event);
        lines.push(line);
    }
    check_events(&events).map_err(|(i, msg)| HarnessError::Trace { line: lines[i], msg })?;
    Ok(events)
}

/// Index and description of the first ill-formed event.
fn check_events(events: &[TraceEvent]) -> Result<(), (usize, String)> {
    let mut live = HashMap::new();
    for (i, event) in events.iter().enumerate() {
        match *event {
            TraceEvent::Alloc { id, size } => {
                if live.insert(id, size).is_some() {
                    return Err((i, format!("id {id} allocated while still live")));
                }
            }
            TraceEvent::Free { id } => {
                if live.remove(&id).is_none() {
                    return Err((i, format!("free of unknown id {id}")));
                }
            }
        }
    }
    Ok(())
}

/// Peak live bytes when every allocation is rounded up to `alignment`
/// (an allocation never takes less than one `alignment` unit).
fn peak_live(events: &[TraceEvent], alignment: u64) -> u64 {
    let mut sizes = HashMap::new();
    let (mut live, mut peak) = (0u64, 0u64);
    for event in events {
        match *event {
            TraceEvent::Alloc { id, size } => {
                let rounded = size.max(1).div_ceil(alignment) * alignment;
                sizes.insert(id, rounded);
                live += rounded;
                peak = peak.max(live);
            }
            TraceEvent::Free { id } => live -= sizes.remove(&id).unwrap_or(0),
        }
    }
    peak
}

/// Replays `events` once per alignment and compares each peak with the
/// 8-byte-aligned peak.
pub fn analyze_trace(events: &[TraceEvent], alignments: &[u64], ts: u32) -> Result<OverheadReport, HarnessError> {
    check_events(events).map_err(|(i, msg)| HarnessError::Trace { line: i + 1, msg })?;
    if let Some(bad) = alignments
        .iter()
        .find(|a| !a.is_power_of_two() || **a < BASE_ALIGNMENT)
    {
        return Err(HarnessError::Input(format!(
            "alignment {bad} is not a power of two of at least {BASE_ALIGNMENT}"
        )));
    }
    let mut alignments = alignments.to_vec();
    alignments.sort_unstable();
    alignments.dedup();
    let base = peak_live(events, BASE_ALIGNMENT);
    let rows = alignments
        .into_iter()
        .map(|alignment| {
            let peak = peak_live(events, alignment);
            let overhead_pct = if base == 0 {
                0.0
            } else {
                (peak - base) as f64 / base as f64 * 100.0
            };
            OverheadRow {
                alignment,
                peak_bytes: peak,
                overhead_pct,
                tag_storage_bytes: peak as f64 * f64::from(ts) / (8.0 * alignment as f64),
            }
        })
        .collect();
    Ok(OverheadReport {
        ts,
        base_peak_bytes: base,
        rows,
    })
}
