//! Explicit-state exploration and the named checks.
//!
//! [`explore`] replays a workload under every schedule within bounds and
//! keeps, per schedule, the observable trace, every intermediate state and
//! (for crash schedules) the set of recovered post-crash states. The checks
//! are pure functions of that exploration.

mod boundary;
mod crash;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use boundary::{
    check_clean_durable, check_commit_boundary, check_no_commit_time, check_retry_soundness,
};
pub use crash::{
    check_device_queries, check_flush_noop, check_plp_equivalence, check_prefix_consistency,
    check_write_sync_rename, classify_target, op_reflection, wsr_harness, wsr_target, wsr_temp,
    Reflection, Replacement, WsrSteps, WSR_DIR,
};

use crate::error::Result;
use crate::fault::{
    crash_states, enumerate_schedules, recover, Bounds, FaultSchedule, FsView, Injector,
    RecoveredState,
};
use crate::model::{durable, SyscallResult, SystemState, Trace, WriteItem};
use crate::syscall::{background, Background};
use crate::workload::Harness;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    CommitBoundary,
    RetrySoundness,
    CleanDurable,
    PrefixConsistency,
    WriteSyncRename,
    Completeness,
    NoCommitTime,
    FlushNoop,
    PlpEquivalence,
    DeviceQueries,
}

impl CheckName {
    pub const ALL: [CheckName; 10] = [
        CheckName::CommitBoundary,
        CheckName::RetrySoundness,
        CheckName::CleanDurable,
        CheckName::PrefixConsistency,
        CheckName::WriteSyncRename,
        CheckName::Completeness,
        CheckName::NoCommitTime,
        CheckName::FlushNoop,
        CheckName::PlpEquivalence,
        CheckName::DeviceQueries,
    ];
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

impl std::str::FromStr for CheckName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| crate::Error::Config(format!("unknown check {s:?}")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    Violated,
    WitnessFound,
    StructurallyIncomplete,
}

impl Verdict {
    pub fn holds(self) -> bool {
        self == Verdict::Holds
    }
}

/// Two schedules the application cannot tell apart that disagree on
/// durability.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub schedule_a: FaultSchedule,
    pub schedule_b: FaultSchedule,
    pub state_a: SystemState,
    pub state_b: SystemState,
    pub shared_trace: Trace,
    pub verdict_a: bool,
    pub verdict_b: bool,
}

impl Witness {
    pub fn faults(&self) -> usize {
        self.schedule_a.faults() + self.schedule_b.faults()
    }
}

/// A single run (optionally a single crash state) that breaks a property.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub schedule: FaultSchedule,
    pub trace: Trace,
    /// State index (0 = initial, i + 1 = after step i) the violation was seen in.
    pub step: Option<usize>,
    pub description: String,
    pub view: Option<FsView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: CheckName,
    pub verdict: Verdict,
    pub witnesses: Vec<Witness>,
    pub counterexamples: Vec<Counterexample>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commit_time_exists: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commit_candidate: Option<usize>,
    pub explored: usize,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(check: CheckName, verdict: Verdict, explored: usize) -> Self {
        CheckReport {
            check,
            verdict,
            witnesses: Vec::new(),
            counterexamples: Vec::new(),
            commit_time_exists: None,
            commit_candidate: None,
            explored,
            notes: Vec::new(),
        }
    }
}

/// Durability of `writes` at an intermediate state: versions the workload
/// has not issued yet count as not durable.
pub(crate) fn durable_at(state: &SystemState, writes: &[WriteItem]) -> Result<bool> {
    let pending = writes
        .iter()
        .any(|w| matches!(w, WriteItem::Data(v) if !state.app.issued.contains_key(v)));
    if pending {
        return Ok(false);
    }
    durable(state, writes)
}

/// Reports keep only the first few counterexamples in canonical order.
pub const MAX_COUNTEREXAMPLES: usize = 4;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub schedule: FaultSchedule,
    pub results: Vec<SyscallResult>,
    pub states: Vec<SystemState>,
    /// Recovered states after the power cut, empty when the schedule has none.
    pub crash_states: Vec<RecoveredState>,
}

impl Outcome {
    pub fn trace(&self) -> &Trace {
        self.final_state().trace()
    }

    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("initial state present")
    }

    pub fn executed(&self) -> usize {
        self.results.len()
    }
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub outcomes: Vec<Outcome>,
}

/// All recovered states a power cut could produce from `state`, including
/// those where background writeback or a periodic commit ran first.
pub fn post_crash_states(harness: &Harness, state: &SystemState) -> Vec<RecoveredState> {
    let mut out = BTreeSet::new();
    for bg in Background::ALL {
        let progressed = background(state, &harness.env, bg);
        for image in crash_states(&progressed) {
            out.insert(recover(&image, harness.env.profile.journal_mode));
        }
    }
    out.into_iter().collect()
}

/// Replays one schedule from scratch.
pub fn replay(harness: &Harness, schedule: &FaultSchedule) -> Outcome {
    let mut inj = Injector::with_plan(schedule.plan());
    let run = harness.run(&mut inj, schedule.crash_after);
    let crash_states = match schedule.crash_after {
        Some(_) => post_crash_states(harness, run.final_state()),
        None => Vec::new(),
    };
    Outcome {
        schedule: schedule.clone(),
        results: run.results,
        states: run.states,
        crash_states,
    }
}

pub fn explore(harness: &Harness, bounds: &Bounds) -> Result<Exploration> {
    let schedules = enumerate_schedules(harness, bounds)?;
    let outcomes = schedules.iter().map(|s| replay(harness, s)).collect();
    Ok(Exploration { outcomes })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub schedule: FaultSchedule,
    pub trace: Trace,
    pub durable: bool,
    pub digest: String,
    pub crash_states: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub outcomes: Vec<OutcomeSummary>,
    pub explored: usize,
}

pub fn explore_report(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<ExploreReport> {
    let ex = explore(harness, bounds)?;
    let mut outcomes = Vec::new();
    for o in &ex.outcomes {
        outcomes.push(OutcomeSummary {
            schedule: o.schedule.clone(),
            trace: o.trace().clone(),
            durable: durable_at(o.final_state(), writes)?,
            digest: o.final_state().digest(),
            crash_states: o.crash_states.len(),
        });
    }
    Ok(ExploreReport {
        explored: outcomes.len(),
        outcomes,
    })
}

/// Re-runs both schedules of a witness independently and confirms they
/// share the trace and disagree on durability as recorded.
pub fn validate_witness(
    harness: &Harness,
    writes: &[WriteItem],
    witness: &Witness,
) -> Result<bool> {
    let a = replay(harness, &witness.schedule_a);
    let b = replay(harness, &witness.schedule_b);
    let da = durable_at(a.final_state(), writes)?;
    let db = durable_at(b.final_state(), writes)?;
    Ok(a.trace() == &witness.shared_trace
        && b.trace() == &witness.shared_trace
        && da == witness.verdict_a
        && db == witness.verdict_b
        && da != db)
}
