//! Checks over post-crash states, plus the device-level checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::boundary::find_witnesses as find_witness_pairs;
use super::{
    explore, CheckName, CheckReport, Counterexample, Outcome, Verdict, MAX_COUNTEREXAMPLES,
};
use crate::device::{verify_q, DeviceConfig, FlushResult, Query};
use crate::error::{Error, Result};
use crate::fault::{Bounds, RecoveredState};
use crate::model::{FilePath, InodeId, PageKey, SystemState, Version, WriteItem};
use crate::syscall::{read_page, Env};
use crate::workload::{Harness, InitialFile, Op};

fn with_crash(bounds: &Bounds) -> Bounds {
    Bounds {
        allow_crash: true,
        ..bounds.clone()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reflection {
    Reflected,
    NotReflected,
    /// Neither the op's effect nor the state before it.
    Garbled,
    /// Reads, fsyncs and failed ops change nothing to reflect.
    NotApplicable,
}

/// Object an op acts on, for subsumption by later ops.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Target {
    Page(PageKey),
    Inode(InodeId),
}

fn target(outcome: &Outcome, harness: &Harness, i: usize) -> Option<Target> {
    let (before, after) = (&outcome.states[i], &outcome.states[i + 1]);
    match &harness.ops[i] {
        Op::Write { path, index } => after
            .resolve(path)
            .map(|ino| Target::Page(PageKey { ino, index: *index })),
        Op::Create { path, .. } => after.resolve(path).map(Target::Inode),
        Op::Rename { from, .. } | Op::Unlink { path: from } => {
            before.resolve(from).map(Target::Inode)
        }
        _ => None,
    }
}

/// Whether the recovered state shows the effect of op `i` of `outcome`,
/// judged against the in-memory states just before and after it.
pub fn op_reflection(
    harness: &Harness,
    outcome: &Outcome,
    i: usize,
    recovered: &RecoveredState,
) -> Reflection {
    if !outcome.results[i].is_ok() {
        return Reflection::NotApplicable;
    }
    let (before, after) = (&outcome.states[i], &outcome.states[i + 1]);
    match &harness.ops[i] {
        Op::Write { path, index } => {
            let Some(ino) = after.resolve(path) else {
                return Reflection::NotApplicable;
            };
            let key = PageKey { ino, index: *index };
            let v = harness.version_of(i).expect("write version");
            let later: BTreeSet<Version> = (i + 1..outcome.executed())
                .filter(|&j| outcome.results[j].is_ok())
                .filter(|&j| matches!(&harness.ops[j], Op::Write { index: x, .. } if x == index))
                .filter(|&j| match &harness.ops[j] {
                    Op::Write { path, .. } => outcome.states[j + 1].resolve(path) == Some(ino),
                    _ => false,
                })
                .filter_map(|j| harness.version_of(j))
                .collect();
            let held = recovered.contents.get(&key).copied();
            let prior = ideal_page(before, key);
            match held {
                Some(h) if h == v || later.contains(&h) => Reflection::Reflected,
                h if h == prior => Reflection::NotReflected,
                _ => Reflection::Garbled,
            }
        }
        Op::Create { path, .. } => {
            let created = after.resolve(path);
            if before.resolve(path).is_some() {
                return Reflection::NotApplicable;
            }
            let ino = created.expect("create succeeded");
            if recovered.meta.namespace.values().any(|i| *i == ino) {
                Reflection::Reflected
            } else {
                Reflection::NotReflected
            }
        }
        Op::Rename { from, to } => {
            let ino = before.resolve(from).expect("rename succeeded");
            let displaced = before.resolve(to);
            match (recovered.resolve(from), recovered.resolve(to)) {
                (f, Some(t)) if t == ino && f != Some(ino) => Reflection::Reflected,
                (Some(f), t) if f == ino && t == displaced => Reflection::NotReflected,
                _ => Reflection::Garbled,
            }
        }
        Op::Unlink { path } => {
            let ino = before.resolve(path).expect("unlink succeeded");
            if recovered.resolve(path) == Some(ino) {
                Reflection::NotReflected
            } else {
                Reflection::Reflected
            }
        }
        _ => Reflection::NotApplicable,
    }
}

/// Content of a page as the application would see it, `None` for a hole
/// that has never been written or mapped.
fn ideal_page(state: &SystemState, key: PageKey) -> Option<Version> {
    if let Some(p) = state.page(key) {
        return Some(p.version);
    }
    state.fs.block_map.get(&key)?;
    let path = state
        .fs
        .mem_ns
        .iter()
        .find(|(_, i)| **i == key.ino)
        .map(|(p, _)| p.clone());
    match path {
        Some(p) => read_page(state, &p, key.index),
        None => Some(Version::INITIAL),
    }
}

fn prefix_violation(
    harness: &Harness,
    outcome: &Outcome,
    upto: usize,
    rec: &RecoveredState,
) -> Option<String> {
    if let Some(issue) = rec.inconsistencies.first() {
        return Some(format!("recovery found {issue:?}"));
    }
    let refl: Vec<Reflection> = (0..upto)
        .map(|i| op_reflection(harness, outcome, i, rec))
        .collect();
    let targets: Vec<Option<Target>> = (0..upto).map(|i| target(outcome, harness, i)).collect();
    if let Some(i) = refl.iter().position(|r| *r == Reflection::Garbled) {
        return Some(format!("op {i} is neither applied nor absent"));
    }
    // A later reflected op on the same object implies the earlier one.
    let effective: Vec<Reflection> = (0..upto)
        .map(|i| {
            let subsumed = refl[i] == Reflection::NotReflected
                && targets[i].is_some()
                && (i + 1..upto)
                    .any(|j| refl[j] == Reflection::Reflected && targets[j] == targets[i]);
            if subsumed {
                Reflection::Reflected
            } else {
                refl[i]
            }
        })
        .collect();
    for j in 0..upto {
        if effective[j] != Reflection::Reflected {
            continue;
        }
        if let Some(i) = (0..j).find(|&i| effective[i] == Reflection::NotReflected) {
            return Some(format!("op {j} is reflected but earlier op {i} is not"));
        }
    }
    None
}

/// Without fsync, every crash state must reflect some prefix of the
/// executed ops.
pub fn check_prefix_consistency(harness: &Harness, bounds: &Bounds) -> Result<CheckReport> {
    if harness.ops.iter().any(Op::is_fsync) {
        return Err(Error::Precondition(
            "prefix-consistency workload must not contain fsync".into(),
        ));
    }
    let ex = explore(harness, &with_crash(bounds))?;
    let mut counterexamples = Vec::new();
    let mut examined = 0usize;
    for o in &ex.outcomes {
        let Some(upto) = o.schedule.crash_after else {
            continue;
        };
        let upto = upto.min(o.executed());
        for rec in &o.crash_states {
            examined += 1;
            if let Some(why) = prefix_violation(harness, o, upto, rec) {
                counterexamples.push(Counterexample {
                    schedule: o.schedule.clone(),
                    trace: o.trace().clone(),
                    step: Some(upto),
                    description: why,
                    view: Some(rec.view()),
                });
            }
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::PrefixConsistency, verdict, ex.outcomes.len());
    report.notes.push(format!(
        "{examined} crash states examined, {} outside the prefix set",
        counterexamples.len()
    ));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}

/// Which of the four replacement steps run: write the temp file, fsync it,
/// rename it over the target, fsync the directory.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsrSteps {
    pub write: bool,
    pub fsync_file: bool,
    pub rename: bool,
    pub fsync_dir: bool,
}

impl WsrSteps {
    pub const ALL: WsrSteps = WsrSteps {
        write: true,
        fsync_file: true,
        rename: true,
        fsync_dir: true,
    };
}

pub const WSR_DIR: &str = "d";

pub fn wsr_target() -> FilePath {
    FilePath::new(WSR_DIR, "target")
}

pub fn wsr_temp() -> FilePath {
    FilePath::new(WSR_DIR, "tmp")
}

/// `d/target` starts with one durable page; the protocol replaces it with a
/// new page via `d/tmp`.
pub fn wsr_harness(steps: WsrSteps, env: Env, device: DeviceConfig) -> Result<Harness> {
    let (target, tmp) = (wsr_target(), wsr_temp());
    let mut ops = vec![Op::Create {
        path: tmp.clone(),
        exclusive: true,
    }];
    if steps.write {
        ops.push(Op::Write {
            path: tmp.clone(),
            index: 0,
        });
    }
    if steps.fsync_file {
        ops.push(Op::Fsync { path: tmp.clone() });
    }
    if steps.rename {
        ops.push(Op::Rename {
            from: tmp,
            to: target.clone(),
        });
    }
    if steps.fsync_dir {
        ops.push(Op::FsyncDir {
            dir: WSR_DIR.into(),
        });
    }
    Harness::new(
        env,
        device,
        vec![InitialFile {
            path: target,
            pages: 1,
        }],
        ops,
        true,
    )
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replacement {
    Old,
    New,
    Neither,
}

/// Classifies what the target holds in a recovered state.
pub fn classify_target(harness: &Harness, rec: &RecoveredState) -> Replacement {
    let target = wsr_target();
    let old = harness.initial_version(&target, 0);
    let new = harness.data_writes().first().map(|w| match w {
        WriteItem::Data(v) => *v,
        WriteItem::Binding(_) => unreachable!("data_writes only yields data"),
    });
    let Some(ino) = rec.resolve(&target) else {
        return Replacement::Neither;
    };
    let held = rec.contents.get(&PageKey { ino, index: 0 }).copied();
    let pages = rec.contents.keys().filter(|k| k.ino == ino).count();
    if pages == 1 && held == old {
        Replacement::Old
    } else if pages == 1 && held.is_some() && held == new {
        Replacement::New
    } else {
        Replacement::Neither
    }
}

/// Every crash state must show the target as entirely old or entirely new,
/// and once the whole protocol has returned ok it must be new.
pub fn check_write_sync_rename(harness: &Harness, bounds: &Bounds) -> Result<CheckReport> {
    if harness.initial_version(&wsr_target(), 0).is_none() {
        return Err(Error::Precondition(
            "write-sync-rename needs an existing d/target".into(),
        ));
    }
    let ex = explore(harness, &with_crash(bounds))?;
    let mut counterexamples = Vec::new();
    let mut examined = 0usize;
    for o in &ex.outcomes {
        let Some(upto) = o.schedule.crash_after else {
            continue;
        };
        let completed = upto >= harness.ops.len()
            && o.executed() == harness.ops.len()
            && o.results.iter().all(|r| r.is_ok());
        for rec in &o.crash_states {
            examined += 1;
            let class = classify_target(harness, rec);
            let bad = match class {
                Replacement::Neither => Some("target is neither the old nor the new content"),
                Replacement::Old if completed => {
                    Some("every step returned ok but the target is still old")
                }
                _ => None,
            };
            if let Some(why) = bad {
                counterexamples.push(Counterexample {
                    schedule: o.schedule.clone(),
                    trace: o.trace().clone(),
                    step: Some(upto.min(o.executed())),
                    description: why.into(),
                    view: Some(rec.view()),
                });
            }
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::WriteSyncRename, verdict, ex.outcomes.len());
    report.notes.push(format!(
        "{examined} crash states examined, {} violating",
        counterexamples.len()
    ));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}

/// Issues a flush at every fault-free reachable state. Without a volatile
/// cache it must succeed and leave media and cache untouched.
pub fn check_flush_noop(harness: &Harness) -> Result<CheckReport> {
    let ex = explore(harness, &Bounds::default())?;
    let volatile = harness.device.volatile();
    let mut counterexamples = Vec::new();
    let mut examined = 0usize;
    for o in &ex.outcomes {
        for (idx, state) in o.states.iter().enumerate() {
            examined += 1;
            let (after, res) = state.device.issue_flush(false);
            let problem = if res != FlushResult::Success {
                Some("flush did not succeed")
            } else if !volatile && after != state.device {
                Some("flush changed device contents without a volatile cache")
            } else {
                None
            };
            if let Some(why) = problem {
                counterexamples.push(Counterexample {
                    schedule: o.schedule.clone(),
                    trace: state.trace().clone(),
                    step: Some(idx),
                    description: why.into(),
                    view: None,
                });
            }
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::FlushNoop, verdict, ex.outcomes.len());
    report.notes.push(format!(
        "{examined} flushes issued on a {} device",
        if volatile {
            "volatile-cache"
        } else {
            "non-volatile"
        }
    ));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}

type CrashSets = BTreeMap<(Vec<bool>, Option<usize>), BTreeSet<RecoveredState>>;

fn crash_sets(harness: &Harness, bounds: &Bounds) -> Result<CrashSets> {
    let ex = explore(harness, bounds)?;
    Ok(ex
        .outcomes
        .into_iter()
        .filter(|o| o.schedule.crash_after.is_some())
        .map(|o| {
            (
                (o.schedule.plan(), o.schedule.crash_after),
                o.crash_states.into_iter().collect(),
            )
        })
        .collect())
}

/// A power-loss-protected cache is indistinguishable from no cache: per
/// crash point, both devices recover to the same set of states.
pub fn check_plp_equivalence(harness: &Harness, bounds: &Bounds) -> Result<CheckReport> {
    let fua = harness.device.fua_supported;
    let plp = harness.with_device(DeviceConfig {
        volatile_cache_present: true,
        volatile_cache_enabled: true,
        fua_supported: fua,
        plp: true,
    })?;
    let plain = harness.with_device(DeviceConfig {
        fua_supported: fua,
        ..DeviceConfig::NO_CACHE
    })?;
    let bounds = Bounds {
        max_faults: 0,
        ..with_crash(bounds)
    };
    let a = crash_sets(&plp, &bounds)?;
    let b = crash_sets(&plain, &bounds)?;
    let keys: BTreeSet<_> = a.keys().chain(b.keys()).cloned().collect();
    let mut counterexamples = Vec::new();
    let empty = BTreeSet::new();
    for key in &keys {
        let (sa, sb) = (a.get(key).unwrap_or(&empty), b.get(key).unwrap_or(&empty));
        if sa != sb {
            let extra = sa.symmetric_difference(sb).next().map(RecoveredState::view);
            counterexamples.push(Counterexample {
                schedule: crate::fault::FaultSchedule::default(),
                trace: Vec::new(),
                step: key.1,
                description: format!(
                    "crash after step {:?}: {} states with PLP, {} without a cache",
                    key.1,
                    sa.len(),
                    sb.len()
                ),
                view: extra,
            });
        }
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::PlpEquivalence, verdict, a.len() + b.len());
    report
        .notes
        .push(format!("{} crash points compared", keys.len()));
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}

/// Answers Q1 to Q4 for the harness device. Holds iff Q4 finds the
/// post-failure state well defined.
pub fn check_device_queries(
    harness: &Harness,
    writes: &[WriteItem],
    bounds: &Bounds,
) -> Result<CheckReport> {
    let mut notes = Vec::new();
    let mut q4 = true;
    for q in [Query::Q1, Query::Q2, Query::Q3, Query::Q4] {
        let ans = verify_q(harness, writes, bounds, q)?;
        notes.push(format!(
            "{:?}: {} ({})",
            q,
            if ans.answer { "yes" } else { "no" },
            ans.explanation
        ));
        if q == Query::Q4 {
            q4 = ans.answer;
        }
    }
    let mut report = CheckReport::new(
        CheckName::DeviceQueries,
        if q4 {
            Verdict::Holds
        } else {
            Verdict::WitnessFound
        },
        0,
    );
    if !q4 {
        let mut b = bounds.clone();
        b.max_faults = b.max_faults.max(1);
        b.allow_crash = false;
        b.crash_positions = None;
        let ex = explore(harness, &b)?;
        report.explored = ex.outcomes.len();
        report.witnesses = find_witness_pairs(&ex, writes)?;
    }
    report.notes = notes;
    Ok(report)
}
