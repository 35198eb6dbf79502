//! Checks on final and intermediate states of fault-only (no crash) runs.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    durable_at, explore, CheckName, CheckReport, Counterexample, Exploration, Outcome, Verdict,
    Witness, MAX_COUNTEREXAMPLES,
};
use crate::error::{Error, Result};
use crate::fault::Bounds;
use crate::model::{all_clean, SyscallResult, Trace, WriteItem};
use crate::workload::{Harness, Op};

fn no_crash(bounds: &Bounds) -> Bounds {
    Bounds {
        allow_crash: false,
        crash_positions: None,
        ..bounds.clone()
    }
}

/// Mixed-verdict pairs, one per trace, each the pair with fewest faults;
/// earliest canonical schedules break ties.
pub(super) fn find_witnesses(ex: &Exploration, writes: &[WriteItem]) -> Result<Vec<Witness>> {
    let mut groups: BTreeMap<&Trace, Vec<(&Outcome, bool)>> = BTreeMap::new();
    for o in &ex.outcomes {
        let d = durable_at(o.final_state(), writes)?;
        groups.entry(o.trace()).or_default().push((o, d));
    }
    let mut witnesses = Vec::new();
    for (trace, members) in groups {
        let lost: Vec<&Outcome> = members
            .iter()
            .filter(|(_, d)| !d)
            .map(|(o, _)| *o)
            .collect();
        let kept: Vec<&Outcome> = members
            .iter()
            .filter(|(_, d)| *d)
            .map(|(o, _)| *o)
            .collect();
        let best = lost
            .iter()
            .flat_map(|a| kept.iter().map(move |b| (*a, *b)))
            .min_by_key(|(a, b)| {
                (
                    a.schedule.faults() + b.schedule.faults(),
                    a.schedule.canonical_key(),
                    b.schedule.canonical_key(),
                )
            });
        if let Some((a, b)) = best {
            witnesses.push(Witness {
                schedule_a: a.schedule.clone(),
                schedule_b: b.schedule.clone(),
                state_a: a.final_state().clone(),
                state_b: b.final_state().clone(),
                shared_trace: trace.clone(),
                verdict_a: false,
                verdict_b: true,
            });
        }
    }
    witnesses.sort_by_key(|w| {
        (
            w.faults(),
            w.schedule_a.canonical_key(),
            w.schedule_b.canonical_key(),
        )
    });
    Ok(witnesses)
}

/// Groups outcomes by observable trace. A trace whose outcomes disagree on
/// durability of `writes` is a witness that the final syscall's return does
/// not decide durability.
pub fn check_commit_boundary(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<CheckReport> {
    match harness.ops.last() {
        Some(op) if op.is_fsync() => {}
        _ => {
            return Err(Error::Precondition(
                "commit-boundary workload must end with the fsync under test".into(),
            ))
        }
    }
    let ex = explore(harness, &no_crash(bounds))?;
    let witnesses = find_witnesses(&ex, writes)?;
    let verdict = if witnesses.is_empty() {
        Verdict::Holds
    } else {
        Verdict::WitnessFound
    };
    let mut report = CheckReport::new(CheckName::CommitBoundary, verdict, ex.outcomes.len());
    let traces: BTreeSet<&Trace> = ex.outcomes.iter().map(|o| o.trace()).collect();
    report.notes.push(format!(
        "{} distinct observable traces, {} with both durable and non-durable outcomes",
        traces.len(),
        witnesses.len()
    ));
    report.witnesses = witnesses;
    Ok(report)
}

fn fsync_path(op: &Op) -> Option<&crate::model::FilePath> {
    match op {
        Op::Fsync { path } | Op::FsyncRetry { path } => Some(path),
        _ => None,
    }
}

/// An fsync that returns ok after an earlier fsync of the same file reported
/// EIO, while the written data is still not durable.
pub fn check_retry_soundness(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<CheckReport> {
    let pairs: Vec<(usize, usize)> = (0..harness.ops.len())
        .flat_map(|i| (i + 1..harness.ops.len()).map(move |j| (i, j)))
        .filter(|(i, j)| {
            let (a, b) = (fsync_path(&harness.ops[*i]), fsync_path(&harness.ops[*j]));
            a.is_some() && a == b
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Precondition(
            "retry-soundness workload needs an fsync followed by a retry of the same file".into(),
        ));
    }
    let ex = explore(harness, &no_crash(bounds))?;
    let mut counterexamples = Vec::new();
    for o in &ex.outcomes {
        for &(i, j) in &pairs {
            if j >= o.executed() {
                continue;
            }
            if o.results[i] == SyscallResult::Eio
                && o.results[j] == SyscallResult::Ok
                && !durable_at(&o.states[j + 1], writes)?
            {
                counterexamples.push(Counterexample {
                    schedule: o.schedule.clone(),
                    trace: o.trace().clone(),
                    step: Some(j + 1),
                    description: format!("fsync at step {i} returned EIO; retry at step {j} returned ok; data not durable"),
                    view: None,
                });
                break;
            }
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::RetrySoundness, verdict, ex.outcomes.len());
    report.notes.push(format!(
        "{} schedule(s) where the retry reports success without durability",
        counterexamples.len()
    ));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    report.witnesses = find_witnesses(&ex, writes)?;
    Ok(report)
}

/// Searches every reachable state for one where all pages of `writes` are
/// cached and clean yet not durable.
pub fn check_clean_durable(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<CheckReport> {
    let ex = explore(harness, &no_crash(bounds))?;
    let mut counterexamples = Vec::new();
    let mut states = 0;
    for o in &ex.outcomes {
        for (idx, state) in o.states.iter().enumerate().skip(1) {
            states += 1;
            if all_clean(state, writes) && !durable_at(state, writes)? {
                counterexamples.push(Counterexample {
                    schedule: o.schedule.clone(),
                    trace: state.trace().clone(),
                    step: Some(idx),
                    description: "every write-set page is clean but the write-set is not durable"
                        .into(),
                    view: None,
                });
                break;
            }
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::CleanDurable, verdict, ex.outcomes.len());
    report
        .notes
        .push(format!("{states} reachable states examined"));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}

/// Candidate commit instants are step indices. Step `k` qualifies when, for
/// every observation prefix up to and including `k`, all schedules sharing it
/// agree on durability at every later state, and some prefix is durable.
pub fn check_no_commit_time(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<CheckReport> {
    let ex = explore(harness, &no_crash(bounds))?;
    let mut verdicts: Vec<Vec<bool>> = Vec::new();
    for o in &ex.outcomes {
        let mut ds = Vec::new();
        for state in &o.states {
            ds.push(durable_at(state, writes)?);
        }
        verdicts.push(ds);
    }
    let longest = ex.outcomes.iter().map(Outcome::executed).max().unwrap_or(0);
    let mut candidate = None;
    for k in 0..longest {
        let mut groups: BTreeMap<&[crate::model::TraceEntry], BTreeSet<bool>> = BTreeMap::new();
        for (o, ds) in ex.outcomes.iter().zip(&verdicts) {
            if o.executed() <= k {
                continue;
            }
            let seen = groups.entry(&o.trace()[..=k]).or_default();
            seen.extend(ds[k + 1..].iter().copied());
        }
        let determined = groups.values().all(|s| s.len() == 1);
        let some_durable = groups.values().any(|s| s.contains(&true));
        if determined && some_durable {
            candidate = Some(k);
            break;
        }
    }
    let exists = candidate.is_some();
    let mut report = CheckReport::new(
        CheckName::NoCommitTime,
        if exists {
            Verdict::Holds
        } else {
            Verdict::WitnessFound
        },
        ex.outcomes.len(),
    );
    report.commit_time_exists = Some(exists);
    report.commit_candidate = candidate;
    if !exists {
        report.witnesses = find_witnesses(&ex, writes)?;
        report
            .notes
            .push("no step index after which the observed returns fix durability".into());
    } else {
        report.notes.push(format!(
            "durability is settled by the observations up to step {}",
            candidate.expect("exists")
        ));
    }
    Ok(report)
}
