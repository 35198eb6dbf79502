//! Canonical report output and step-by-step witness traces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checker::{CheckName, CheckReport, Witness};
use crate::error::{Error, Result};
use crate::fault::{FaultPoint, FaultSchedule, Injector, TransitionRecord};
use crate::model::{LayerId, TraceEntry};
use crate::sim::{RetryReport, RseqReport};
use crate::workload::Harness;

/// Pretty JSON with object keys sorted, so equal values print identically.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub layer: LayerId,
    pub transition: String,
    pub fault: Option<FaultPoint>,
    pub digest: String,
}

impl From<TransitionRecord> for Cell {
    fn from(r: TransitionRecord) -> Self {
        Cell {
            layer: r.layer,
            transition: r.transition,
            fault: r.fault,
            digest: r.digest,
        }
    }
}

/// One line of a witness trace: the `row`-th transition of `step` in each
/// schedule. The last row of a step carries the syscall's observed return.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub row: usize,
    pub a: Option<Cell>,
    pub b: Option<Cell>,
    pub returned_a: Option<TraceEntry>,
    pub returned_b: Option<TraceEntry>,
}

fn recorded(
    harness: &Harness,
    schedule: &FaultSchedule,
) -> (Vec<TransitionRecord>, Vec<TraceEntry>) {
    let mut inj = Injector::with_plan(schedule.plan()).recording();
    let run = harness.run(&mut inj, schedule.crash_after);
    let trace = run.final_state().trace().clone();
    (inj.into_events(), trace)
}

fn by_step(events: Vec<TransitionRecord>) -> BTreeMap<usize, Vec<Cell>> {
    let mut out: BTreeMap<usize, Vec<Cell>> = BTreeMap::new();
    for e in events {
        out.entry(e.step).or_default().push(e.into());
    }
    out
}

/// Replays both schedules with recording on and lays their transitions
/// side by side, step by step.
pub fn trace_rows(
    harness: &Harness,
    a: &FaultSchedule,
    b: Option<&FaultSchedule>,
) -> Vec<TraceRow> {
    let (ea, ta) = recorded(harness, a);
    let (eb, tb) = b.map(|s| recorded(harness, s)).unwrap_or_default();
    let (sa, sb) = (by_step(ea), by_step(eb));
    let steps = ta.len().max(tb.len());
    let mut rows = Vec::new();
    for step in 0..steps {
        let ca = sa.get(&step).cloned().unwrap_or_default();
        let cb = sb.get(&step).cloned().unwrap_or_default();
        let n = ca.len().max(cb.len()).max(1);
        for row in 0..n {
            let last = row + 1 == n;
            rows.push(TraceRow {
                step,
                row,
                a: ca.get(row).cloned(),
                b: cb.get(row).cloned(),
                returned_a: if last { ta.get(step).cloned() } else { None },
                returned_b: if last { tb.get(step).cloned() } else { None },
            });
        }
    }
    rows
}

pub fn witness_rows(harness: &Harness, witness: &Witness) -> Vec<TraceRow> {
    trace_rows(harness, &witness.schedule_a, Some(&witness.schedule_b))
}

/// JSON-lines text for the report's first witness, or for its first
/// counterexample when it has no witness.
pub fn witness_jsonl(harness: &Harness, report: &CheckReport) -> Result<String> {
    let rows = if let Some(w) = report.witnesses.first() {
        witness_rows(harness, w)
    } else if let Some(cx) = report.counterexamples.first() {
        if report.check == CheckName::Completeness {
            return Err(Error::NoWitness);
        }
        trace_rows(harness, &cx.schedule, None)
    } else {
        return Err(Error::NoWitness);
    };
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the witness trace to `path`. Nothing is written when there is no
/// witness.
pub fn emit_witness_trace(harness: &Harness, report: &CheckReport, path: &Path) -> Result<()> {
    let text = witness_jsonl(harness, report)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub scenario: String,
    pub checks: BTreeMap<CheckName, CheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retry: Option<RetryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rseq: Option<RseqReport>,
}

impl FullReport {
    pub fn all_hold(&self) -> bool {
        self.checks.values().all(|r| r.verdict.holds())
    }
}
