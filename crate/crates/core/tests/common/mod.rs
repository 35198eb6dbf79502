//! Brute-force reference implementations used to cross-check the checker.
//!
//! Nothing here shares code with the search or the property definitions in
//! the library beyond the raw transition functions.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use persistcheck::checker::{CheckName, Verdict};
use persistcheck::completeness::Protocol;
use persistcheck::device::{BlockContent, DeviceBlock, DeviceState, MediaImage};
use persistcheck::fault::{recover, FsView, Injector};
use persistcheck::model::{
    FilePath, MetaOp, SyscallResult, SystemState, TraceEntry, Version, WriteItem,
};
use persistcheck::scenario::Scenario;
use persistcheck::syscall::{background, read_page, Background};
use persistcheck::workload::{Harness, Op};

/// A run under a fixed decision vector, optionally cut short.
#[derive(Clone, Debug)]
pub struct NaiveRun {
    pub plan: Vec<bool>,
    pub crash_after: Option<usize>,
    pub states: Vec<SystemState>,
    pub results: Vec<SyscallResult>,
}

impl NaiveRun {
    pub fn last(&self) -> &SystemState {
        self.states.last().unwrap()
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.last().trace().clone()
    }
}

fn vectors(len: usize, max_true: usize) -> Vec<Vec<bool>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::new();
        for v in out {
            let used = v.iter().filter(|b| **b).count();
            let mut f = v.clone();
            f.push(false);
            next.push(f);
            if used < max_true {
                let mut t = v;
                t.push(true);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

fn run_once(h: &Harness, plan: &[bool], limit: Option<usize>) -> (NaiveRun, usize) {
    let mut inj = Injector::with_plan(plan.to_vec());
    let run = h.run(&mut inj, limit);
    let taken = inj.taken().len();
    let plan = plan
        .iter()
        .copied()
        .chain(std::iter::repeat(false))
        .take(taken)
        .collect();
    (
        NaiveRun {
            plan,
            crash_after: limit,
            states: run.states,
            results: run.results,
        },
        taken,
    )
}

/// Every distinct run reachable with at most `max_faults` injected faults:
/// tries every decision vector long enough to cover the longest run.
pub fn naive_runs(h: &Harness, max_faults: usize, crash: bool) -> Vec<NaiveRun> {
    let mut len = 1;
    loop {
        let mut seen = BTreeMap::new();
        let mut longest = 0;
        for v in vectors(len, max_faults) {
            let (full, taken) = run_once(h, &v, None);
            longest = longest.max(taken);
            if crash {
                for p in 0..=full.results.len() {
                    let (r, _) = run_once(h, &v, Some(p));
                    seen.entry((r.plan.clone(), Some(p))).or_insert(r);
                }
            }
            seen.entry((full.plan.clone(), None)).or_insert(full);
        }
        if longest < len {
            return seen.into_values().collect();
        }
        len = longest + 1;
    }
}

/// Crash images by brute force: every ordering of the cached writes that
/// keeps writes to one block in submission order, cut at every point.
pub fn linearized_images(dev: &DeviceState) -> BTreeSet<MediaImage> {
    if dev.config.plp {
        let mut m = dev.media.clone();
        for w in &dev.cache {
            m.insert(w.block, w.content.clone());
        }
        return BTreeSet::from([m]);
    }
    let writes: Vec<(DeviceBlock, BlockContent)> = dev
        .cache
        .iter()
        .map(|w| (w.block, w.content.clone()))
        .collect();
    let mut out = BTreeSet::new();
    fn go(
        order: &mut Vec<usize>,
        writes: &[(DeviceBlock, BlockContent)],
        media: &MediaImage,
        out: &mut BTreeSet<MediaImage>,
    ) {
        let mut image = media.clone();
        out.insert(image.clone());
        for &i in order.iter() {
            image.insert(writes[i].0, writes[i].1.clone());
        }
        out.insert(image);
        for i in 0..writes.len() {
            if order.contains(&i) {
                continue;
            }
            let blocked = (0..i).any(|j| writes[j].0 == writes[i].0 && !order.contains(&j));
            if blocked {
                continue;
            }
            order.push(i);
            go(order, writes, media, out);
            order.pop();
        }
    }
    go(&mut Vec::new(), &writes, &dev.media, &mut out);
    out
}

/// Recovered views after a power cut from `state`, allowing any background
/// progress first.
pub fn naive_crash_views(h: &Harness, state: &SystemState) -> BTreeSet<(FsView, bool)> {
    let mut out = BTreeSet::new();
    for bg in Background::ALL {
        let s = background(state, &h.env, bg);
        for img in linearized_images(&s.device) {
            let r = recover(&img, h.env.profile.journal_mode);
            out.insert((r.view(), r.inconsistencies.is_empty()));
        }
    }
    out
}

/// Survives every possible power cut: present in every crash image, either
/// as a data block or inside a journal transaction whose commit is there too.
pub fn oracle_durable(state: &SystemState, writes: &[WriteItem]) -> bool {
    let images = linearized_images(&state.device);
    writes.iter().all(|w| match w {
        WriteItem::Data(v) => {
            state.app.issued.contains_key(v) && images.iter().all(|img| image_has(img, *v))
        }
        WriteItem::Binding(p) => {
            let want = state.resolve(p);
            images
                .iter()
                .all(|img| recover(img, state.fs.mode).meta.namespace.get(p).copied() == want)
        }
    })
}

fn image_has(img: &MediaImage, v: Version) -> bool {
    img.iter().any(|(b, c)| match (b, c) {
        (_, BlockContent::Data(x)) => *x == v,
        (DeviceBlock::JournalTxn(id), BlockContent::Txn(ops)) => {
            img.contains_key(&DeviceBlock::JournalCommit(*id))
                && ops
                    .iter()
                    .any(|op| matches!(op, MetaOp::JournaledData { version, .. } if *version == v))
        }
        _ => false,
    })
}

/// What the application would read for every bound path after `state`.
pub fn ideal_view(state: &SystemState) -> FsView {
    let mut view = FsView::new();
    for (path, ino) in &state.fs.mem_ns {
        let mut indices = BTreeSet::new();
        indices.extend(
            state
                .fs
                .pages
                .keys()
                .filter(|k| k.ino == *ino)
                .map(|k| k.index),
        );
        indices.extend(
            state
                .fs
                .block_map
                .keys()
                .filter(|k| k.ino == *ino)
                .map(|k| k.index),
        );
        let pages = indices
            .into_iter()
            .filter_map(|i| read_page(state, path, i).map(|v| (i, v)))
            .collect();
        view.insert(path.clone(), pages);
    }
    view
}

pub fn oracle_commit_boundary(h: &Harness, writes: &[WriteItem], k: usize) -> bool {
    let mut verdicts: BTreeMap<Vec<TraceEntry>, BTreeSet<bool>> = BTreeMap::new();
    for r in naive_runs(h, k, false) {
        verdicts
            .entry(r.trace())
            .or_default()
            .insert(oracle_durable(r.last(), writes));
    }
    verdicts.values().any(|s| s.len() == 2)
}

/// Some step index k such that runs agreeing on the returns up to k agree
/// on durability at every later state, and some of them are durable.
pub fn oracle_commit_time(h: &Harness, writes: &[WriteItem], k: usize) -> Option<usize> {
    let runs = naive_runs(h, k, false);
    let longest = runs.iter().map(|r| r.results.len()).max().unwrap_or(0);
    (0..longest).find(|&step| {
        let live: Vec<&NaiveRun> = runs.iter().filter(|r| r.results.len() > step).collect();
        let later = |r: &NaiveRun| -> Vec<bool> {
            r.states[step + 1..]
                .iter()
                .map(|s| oracle_durable(s, writes))
                .collect()
        };
        let mut any = false;
        for a in &live {
            let la = later(a);
            any |= la.contains(&true);
            for b in &live {
                if a.trace()[..=step] == b.trace()[..=step] {
                    let lb = later(b);
                    if la.iter().chain(&lb).any(|x| *x != la[0]) {
                        return false;
                    }
                }
            }
        }
        any
    })
}

pub fn oracle_clean_not_durable(h: &Harness, writes: &[WriteItem], k: usize) -> bool {
    naive_runs(h, k, false).iter().any(|r| {
        r.states[1..].iter().any(|s| {
            let clean = writes.iter().all(|w| match w {
                WriteItem::Data(v) => s
                    .app
                    .issued
                    .get(v)
                    .and_then(|key| s.fs.pages.get(key))
                    .is_some_and(|p| !p.dirty),
                WriteItem::Binding(_) => true,
            });
            clean && !oracle_durable(s, writes)
        })
    })
}

fn fsync_target(op: &Op) -> Option<&FilePath> {
    match op {
        Op::Fsync { path } | Op::FsyncRetry { path } => Some(path),
        _ => None,
    }
}

pub fn oracle_retry_unsound(h: &Harness, writes: &[WriteItem], k: usize) -> bool {
    naive_runs(h, k, false).iter().any(|r| {
        (0..r.results.len()).any(|j| {
            r.results[j] == SyscallResult::Ok
                && fsync_target(&h.ops[j]).is_some_and(|p| {
                    (0..j).any(|i| {
                        r.results[i] == SyscallResult::Eio && fsync_target(&h.ops[i]) == Some(p)
                    })
                })
                && !oracle_durable(&r.states[j + 1], writes)
        })
    })
}

/// Each crash view must equal what the application saw after some prefix.
pub fn oracle_prefix_violated(h: &Harness, k: usize) -> bool {
    naive_runs(h, k, true)
        .iter()
        .filter(|r| r.crash_after.is_some())
        .any(|r| {
            let ideals: BTreeSet<FsView> = r.states.iter().map(ideal_view).collect();
            naive_crash_views(h, r.last())
                .iter()
                .any(|(view, clean)| !clean || !ideals.contains(view))
        })
}

pub fn oracle_wsr_violated(h: &Harness, k: usize) -> bool {
    let target: FilePath = "d/target".parse().unwrap();
    let old = h.initial_version(&target, 0).unwrap();
    let new = h.version_of(
        h.ops
            .iter()
            .position(|o| matches!(o, Op::Write { .. }))
            .unwrap_or(usize::MAX),
    );
    naive_runs(h, k, true)
        .iter()
        .filter(|r| r.crash_after.is_some())
        .any(|r| {
            let finished = r.crash_after == Some(h.ops.len())
                && r.results.len() == h.ops.len()
                && r.results.iter().all(|c| *c == SyscallResult::Ok);
            naive_crash_views(h, r.last()).iter().any(|(view, _)| {
                let page = view.get(&target);
                let is_old = page == Some(&BTreeMap::from([(0, old)]));
                let is_new = new.is_some_and(|n| page == Some(&BTreeMap::from([(0, n)])));
                !(is_old || is_new) || (finished && !is_new)
            })
        })
}

pub fn oracle_flush_noop_violated(h: &Harness) -> bool {
    naive_runs(h, 0, false).iter().any(|r| {
        r.states.iter().any(|s| {
            let (after, res) = s.device.issue_flush(false);
            res != persistcheck::device::FlushResult::Success
                || (!h.device.volatile() && after != s.device)
        })
    })
}

pub fn oracle_plp_equivalent(h: &Harness) -> bool {
    use persistcheck::device::DeviceConfig;
    let fua = h.device.fua_supported;
    let a = h
        .with_device(DeviceConfig {
            volatile_cache_present: true,
            volatile_cache_enabled: true,
            fua_supported: fua,
            plp: true,
        })
        .unwrap();
    let b = h
        .with_device(DeviceConfig {
            fua_supported: fua,
            ..DeviceConfig::NO_CACHE
        })
        .unwrap();
    let sets = |h: &Harness| -> BTreeMap<Option<usize>, BTreeSet<(FsView, bool)>> {
        naive_runs(h, 0, true)
            .iter()
            .filter(|r| r.crash_after.is_some())
            .map(|r| (r.crash_after, naive_crash_views(h, r.last())))
            .collect()
    };
    sets(&a) == sets(&b)
}

/// Completeness by trying every fault vector directly.
pub fn oracle_completeness(p: &Protocol, k: usize) -> Verdict {
    let initial = p.initial_facts();
    let complete = p.completed_facts();
    let mut stranded_without_reverse = false;
    let mut bad = false;
    for v in vectors(2 * p.steps.len() + 1, k) {
        let mut facts = initial.clone();
        let mut it = v.iter().copied();
        let mut done: Vec<usize> = Vec::new();
        for (idx, s) in p.steps.iter().enumerate() {
            if s.fallible && it.next().unwrap_or(false) {
                for d in done.iter().rev() {
                    match &p.steps[*d].reverse {
                        None => {
                            stranded_without_reverse = true;
                            bad = true;
                            break;
                        }
                        Some(rev) => {
                            if it.next().unwrap_or(false) {
                                bad = true;
                                break;
                            }
                            for f in &rev.remove {
                                facts.remove(f);
                            }
                            for f in &rev.add {
                                facts.insert(f.clone());
                            }
                        }
                    }
                }
                break;
            }
            for f in &s.forward.remove {
                facts.remove(f);
            }
            for f in &s.forward.add {
                facts.insert(f.clone());
            }
            done.push(idx);
        }
        if facts != initial && facts != complete {
            bad = true;
        }
    }
    if !bad {
        Verdict::Holds
    } else if stranded_without_reverse {
        Verdict::StructurallyIncomplete
    } else {
        Verdict::Violated
    }
}

/// The verdict the definitional oracle gives for `check` on `s`.
pub fn oracle_verdict(s: &Scenario, check: CheckName) -> Verdict {
    let h = s.harness().unwrap();
    let w = s.writes(&h).unwrap();
    let k = s.bounds.max_faults;
    let flag = |found: bool, yes: Verdict| if found { yes } else { Verdict::Holds };
    match check {
        CheckName::CommitBoundary => flag(oracle_commit_boundary(&h, &w, k), Verdict::WitnessFound),
        CheckName::DeviceQueries => flag(
            oracle_commit_boundary(&h, &w, k.max(1)),
            Verdict::WitnessFound,
        ),
        CheckName::NoCommitTime => flag(
            oracle_commit_time(&h, &w, k).is_none(),
            Verdict::WitnessFound,
        ),
        CheckName::CleanDurable => flag(oracle_clean_not_durable(&h, &w, k), Verdict::Violated),
        CheckName::RetrySoundness => flag(oracle_retry_unsound(&h, &w, k), Verdict::Violated),
        CheckName::PrefixConsistency => flag(oracle_prefix_violated(&h, k), Verdict::Violated),
        CheckName::WriteSyncRename => flag(oracle_wsr_violated(&h, k), Verdict::Violated),
        CheckName::FlushNoop => flag(oracle_flush_noop_violated(&h), Verdict::Violated),
        CheckName::PlpEquivalence => flag(!oracle_plp_equivalent(&h), Verdict::Violated),
        CheckName::Completeness => oracle_completeness(s.protocol.as_ref().unwrap(), k),
    }
}
