//! Fault injection, schedule enumeration, crash states and journal recovery.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::device::{BlockContent, DeviceBlock, DeviceConfig, DeviceState, MediaImage};
use crate::error::{Error, Result};
use crate::model::{
    AppState, BlockAddr, FilePath, FsHealth, FsState, InodeId, JournalTxn, LayerId, MetaImage,
    MetaOp, PageKey, SystemState, Version,
};
use crate::profile::JournalMode;
use crate::workload::Harness;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultPoint {
    /// Data page submission fails after the page was marked clean.
    F1,
    /// Journal block write fails; the filesystem aborts read-only.
    F2,
    /// Flush barrier fails.
    F3,
    /// Power loss with un-flushed volatile cache.
    F4,
}

impl fmt::Display for FaultPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub point: FaultPoint,
    pub site: String,
    pub inject: bool,
}

/// One resolved run: a decision for every fault opportunity met, plus an
/// optional power cut after step `crash_after` (0 = before the first op).
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub decisions: Vec<Decision>,
    pub crash_after: Option<usize>,
}

impl FaultSchedule {
    pub fn faults(&self) -> usize {
        self.decisions.iter().filter(|d| d.inject).count()
    }

    pub fn plan(&self) -> Vec<bool> {
        self.decisions.iter().map(|d| d.inject).collect()
    }

    /// Positions of the injected faults among the decisions.
    pub fn injected(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.inject)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fewest faults first, then no-crash before crash, then earliest
    /// injection points first.
    pub fn canonical_key(&self) -> (usize, Option<usize>, Vec<usize>, usize) {
        (
            self.faults(),
            self.crash_after,
            self.injected(),
            self.decisions.len(),
        )
    }
}

impl fmt::Display for FaultSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let injected: Vec<String> = self
            .decisions
            .iter()
            .filter(|d| d.inject)
            .map(|d| format!("{}@{}", d.point, d.site))
            .collect();
        if injected.is_empty() {
            f.write_str("no faults")?;
        } else {
            f.write_str(&injected.join(", "))?;
        }
        if let Some(p) = self.crash_after {
            write!(f, "; crash after step {p}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    #[serde(default)]
    pub max_faults: usize,
    #[serde(default)]
    pub allow_crash: bool,
    /// Restricts crash placement; `None` means after every step.
    #[serde(default)]
    pub crash_positions: Option<Vec<usize>>,
    #[serde(default = "default_max_schedules")]
    pub max_schedules: usize,
}

fn default_max_schedules() -> usize {
    100_000
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            max_faults: 0,
            allow_crash: false,
            crash_positions: None,
            max_schedules: default_max_schedules(),
        }
    }
}

/// Per-step record used for witness traces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub step: usize,
    pub layer: LayerId,
    pub transition: String,
    pub fault: Option<FaultPoint>,
    pub digest: String,
}

/// Answers fault opportunities from a plan; anything past the plan passes.
#[derive(Debug, Default)]
pub struct Injector {
    plan: Vec<bool>,
    taken: Vec<Decision>,
    record: bool,
    step: usize,
    events: Vec<TransitionRecord>,
}

impl Injector {
    pub fn passive() -> Self {
        Injector::default()
    }

    pub fn with_plan(plan: Vec<bool>) -> Self {
        Injector {
            plan,
            ..Injector::default()
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn decide(&mut self, point: FaultPoint, site: String) -> bool {
        let inject = self.plan.get(self.taken.len()).copied().unwrap_or(false);
        self.taken.push(Decision {
            point,
            site,
            inject,
        });
        inject
    }

    pub fn note(
        &mut self,
        state: &SystemState,
        layer: LayerId,
        transition: String,
        fault: Option<FaultPoint>,
    ) {
        if self.record {
            self.events.push(TransitionRecord {
                step: self.step,
                layer,
                transition,
                fault,
                digest: state.digest(),
            });
        }
    }

    pub fn taken(&self) -> &[Decision] {
        &self.taken
    }

    pub fn into_events(self) -> Vec<TransitionRecord> {
        self.events
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

fn crash_positions(bounds: &Bounds, executed: usize) -> Vec<usize> {
    if !bounds.allow_crash {
        return Vec::new();
    }
    match &bounds.crash_positions {
        Some(ps) => ps.iter().copied().filter(|p| *p <= executed).collect(),
        None => (0..=executed).collect(),
    }
}

/// Every schedule within `bounds`, in canonical order.
pub fn enumerate_schedules(harness: &Harness, bounds: &Bounds) -> Result<Vec<FaultSchedule>> {
    let mut probe = Injector::passive();
    let happy = harness.run(&mut probe, None);
    let opportunities = probe.taken().len() as u128;
    let fault_combos: u128 = (0..=bounds.max_faults.min(opportunities as usize) as u128)
        .map(|k| binomial(opportunities, k))
        .sum();
    let positions = crash_positions(bounds, happy.executed()).len() as u128;
    let estimate = fault_combos * (1 + positions);
    if estimate > bounds.max_schedules as u128 {
        return Err(Error::BoundOverflow {
            estimate,
            limit: bounds.max_schedules,
        });
    }

    let mut found = BTreeSet::new();
    let mut stack = vec![Vec::<bool>::new()];
    while let Some(prefix) = stack.pop() {
        let mut inj = Injector::with_plan(prefix.clone());
        let run = harness.run(&mut inj, None);
        let taken = inj.taken().to_vec();
        let used = prefix.iter().filter(|b| **b).count();
        for p in crash_positions(bounds, run.executed()) {
            found.insert(FaultSchedule {
                decisions: taken[..run.consumed[p]].to_vec(),
                crash_after: Some(p),
            });
        }
        found.insert(FaultSchedule {
            decisions: taken.clone(),
            crash_after: None,
        });
        if found.len() > bounds.max_schedules {
            return Err(Error::BoundOverflow {
                estimate: found.len() as u128,
                limit: bounds.max_schedules,
            });
        }
        if used < bounds.max_faults {
            for j in prefix.len()..taken.len() {
                let mut next: Vec<bool> = taken[..j].iter().map(|d| d.inject).collect();
                next.push(true);
                stack.push(next);
            }
        }
    }
    let mut schedules: Vec<FaultSchedule> = found.into_iter().collect();
    schedules.sort_by_key(FaultSchedule::canonical_key);
    Ok(schedules)
}

/// Media states a power cut could leave behind. Everything already on media
/// stays; of the cached (current-epoch) writes any subset may have landed,
/// applied in submission order. A PLP cache always survives whole.
pub fn crash_states(state: &SystemState) -> Vec<MediaImage> {
    crash_images(&state.device)
}

pub fn crash_images(device: &DeviceState) -> Vec<MediaImage> {
    if device.cache.is_empty() || device.config.plp {
        return vec![device.power_loss()];
    }
    let n = device.cache.len();
    assert!(n < 24, "cache of {n} writes is too large to enumerate");
    let mut images = BTreeSet::new();
    for mask in 0u32..(1u32 << n) {
        let mut image = device.media.clone();
        for (i, w) in device.cache.iter().enumerate() {
            if mask & (1 << i) != 0 {
                image.insert(w.block, w.content.clone());
            }
        }
        images.insert(image);
    }
    images.into_iter().collect()
}

/// The fault class a power cut represents for this state, if any.
pub fn crash_fault(state: &SystemState) -> Option<FaultPoint> {
    (state.device.config.volatile() && !state.device.cache.is_empty()).then_some(FaultPoint::F4)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Inconsistency {
    /// A committed block map points at a block whose data never reached media.
    UnwrittenBlockReferenced {
        key: PageKey,
        block: BlockAddr,
    },
    UnallocatedBlockReferenced {
        key: PageKey,
        block: BlockAddr,
    },
    DanglingRename {
        from: FilePath,
        to: FilePath,
    },
}

/// Path-level view of a filesystem: which paths exist and what their pages hold.
pub type FsView = BTreeMap<FilePath, BTreeMap<u32, Version>>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecoveredState {
    pub meta: MetaImage,
    pub contents: BTreeMap<PageKey, Version>,
    pub replayed: Vec<u32>,
    /// Structural problems found during replay. Reported, never repaired.
    pub inconsistencies: Vec<Inconsistency>,
    /// data=writeback pages whose metadata landed before their data.
    pub stale: Vec<PageKey>,
}

pub(crate) fn apply_ops(meta: &mut MetaImage, ops: &[MetaOp], issues: &mut Vec<Inconsistency>) {
    for op in ops {
        match op {
            MetaOp::Link { path, ino } => {
                meta.namespace.insert(path.clone(), *ino);
            }
            MetaOp::Unlink { path } => {
                meta.namespace.remove(path);
            }
            MetaOp::Rename { from, to } => match meta.namespace.remove(from) {
                Some(ino) => {
                    meta.namespace.insert(to.clone(), ino);
                }
                None => issues.push(Inconsistency::DanglingRename {
                    from: from.clone(),
                    to: to.clone(),
                }),
            },
            MetaOp::Alloc { block } => {
                meta.allocated.insert(*block);
            }
            MetaOp::Map { key, block } => {
                meta.block_map.insert(*key, *block);
            }
            MetaOp::JournaledData { .. } => {}
        }
    }
}

/// Replays every transaction whose descriptor and commit record are both on
/// media, in log order, on top of the superblock image.
pub fn recover(media: &MediaImage, mode: JournalMode) -> RecoveredState {
    let mut meta = match media.get(&DeviceBlock::Superblock) {
        Some(BlockContent::Meta(m)) => m.clone(),
        _ => MetaImage::default(),
    };
    let mut issues = Vec::new();
    let mut replayed = Vec::new();
    let mut journaled: BTreeMap<BlockAddr, Version> = BTreeMap::new();
    for (block, content) in media {
        let (DeviceBlock::JournalTxn(id), BlockContent::Txn(ops)) = (block, content) else {
            continue;
        };
        if !media.contains_key(&DeviceBlock::JournalCommit(*id)) {
            continue;
        }
        apply_ops(&mut meta, ops, &mut issues);
        for op in ops {
            if let MetaOp::JournaledData { block, version, .. } = op {
                journaled.insert(*block, *version);
            }
        }
        replayed.push(*id);
    }
    let mut contents = BTreeMap::new();
    let mut stale = Vec::new();
    for (key, block) in &meta.block_map {
        if !meta.allocated.contains(block) {
            issues.push(Inconsistency::UnallocatedBlockReferenced {
                key: *key,
                block: *block,
            });
        }
        let held =
            journaled
                .get(block)
                .copied()
                .or_else(|| match media.get(&DeviceBlock::Data(*block)) {
                    Some(BlockContent::Data(v)) => Some(*v),
                    _ => None,
                });
        match held {
            Some(v) => {
                contents.insert(*key, v);
            }
            None => {
                contents.insert(*key, Version::INITIAL);
                if mode == JournalMode::Writeback {
                    stale.push(*key);
                } else {
                    issues.push(Inconsistency::UnwrittenBlockReferenced {
                        key: *key,
                        block: *block,
                    });
                }
            }
        }
    }
    RecoveredState {
        meta,
        contents,
        replayed,
        inconsistencies: issues,
        stale,
    }
}

impl RecoveredState {
    pub fn view(&self) -> FsView {
        self.meta
            .namespace
            .iter()
            .map(|(path, ino)| {
                let pages = self
                    .contents
                    .iter()
                    .filter(|(k, _)| k.ino == *ino)
                    .map(|(k, v)| (k.index, *v))
                    .collect();
                (path.clone(), pages)
            })
            .collect()
    }

    /// A freshly mounted system whose in-memory views equal the recovered
    /// media views, with the journal checkpointed away.
    pub fn into_state(&self, config: DeviceConfig, mode: JournalMode) -> SystemState {
        let mut media = MediaImage::new();
        media.insert(
            DeviceBlock::Superblock,
            BlockContent::Meta(self.meta.clone()),
        );
        for (key, block) in &self.meta.block_map {
            let v = self.contents.get(key).copied().unwrap_or(Version::INITIAL);
            media.insert(DeviceBlock::Data(*block), BlockContent::Data(v));
        }
        let next_ino = self.meta.namespace.values().map(|i| i.0).max().unwrap_or(0) + 1;
        let next_block = self
            .meta
            .allocated
            .iter()
            .map(|b| b.0)
            .max()
            .map_or(0, |b| b + 1);
        let next_txn = self.replayed.iter().max().copied().unwrap_or(0) + 1;
        let fs = FsState {
            mode,
            mem_ns: self.meta.namespace.clone(),
            block_map: self.meta.block_map.clone(),
            allocated: self.meta.allocated.clone(),
            pages: BTreeMap::new(),
            running: JournalTxn::open(next_txn, mode),
            txns: Vec::new(),
            health: FsHealth::Normal,
            error_flags: BTreeSet::new(),
            next_ino,
            next_block,
        };
        SystemState::new(
            AppState {
                issued: BTreeMap::new(),
            },
            fs,
            DeviceState::with_media(config, media),
        )
    }

    pub fn resolve(&self, path: &FilePath) -> Option<InodeId> {
        self.meta.namespace.get(path).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockAddr;

    fn cached(writes: &[(u32, bool)]) -> DeviceState {
        // (block, flush after) pairs
        let mut dev = DeviceState::new(DeviceConfig::default());
        for (n, flush_after) in writes {
            dev = dev
                .submit_write(
                    DeviceBlock::Data(BlockAddr(*n)),
                    BlockContent::Data(Version(*n)),
                    false,
                )
                .unwrap();
            if *flush_after {
                dev = dev.issue_flush(false).0;
            }
        }
        dev
    }

    #[test]
    fn no_inflight_writes_single_crash_state() {
        let dev = DeviceState::new(DeviceConfig::default());
        assert_eq!(crash_images(&dev), vec![dev.media.clone()]);
    }

    #[test]
    fn two_independent_inflight_writes_four_states() {
        assert_eq!(crash_images(&cached(&[(1, false), (2, false)])).len(), 4);
    }

    #[test]
    fn flush_between_writes_leaves_two_states() {
        let images = crash_images(&cached(&[(1, true), (2, false)]));
        assert_eq!(images.len(), 2);
        // second-only is forbidden by the barrier
        assert!(images
            .iter()
            .all(|m| m.contains_key(&DeviceBlock::Data(BlockAddr(1)))));
    }

    #[test]
    fn empty_journal_recovers_media_verbatim() {
        let mut meta = MetaImage::default();
        meta.namespace.insert(FilePath::new("d", "f"), InodeId(1));
        let key = PageKey {
            ino: InodeId(1),
            index: 0,
        };
        meta.block_map.insert(key, BlockAddr(0));
        meta.allocated.insert(BlockAddr(0));
        let mut media = MediaImage::new();
        media.insert(DeviceBlock::Superblock, BlockContent::Meta(meta.clone()));
        media.insert(
            DeviceBlock::Data(BlockAddr(0)),
            BlockContent::Data(Version(3)),
        );
        let rec = recover(&media, JournalMode::Ordered);
        assert_eq!(rec.meta, meta);
        assert_eq!(rec.contents.get(&key), Some(&Version(3)));
        assert!(rec.inconsistencies.is_empty());
        assert!(rec.replayed.is_empty());
    }

    #[test]
    fn uncommitted_txn_is_not_replayed() {
        let mut media = MediaImage::new();
        media.insert(
            DeviceBlock::JournalTxn(1),
            BlockContent::Txn(vec![MetaOp::Link {
                path: FilePath::new("d", "x"),
                ino: InodeId(5),
            }]),
        );
        assert!(recover(&media, JournalMode::Ordered)
            .meta
            .namespace
            .is_empty());
        media.insert(DeviceBlock::JournalCommit(1), BlockContent::Commit);
        assert_eq!(
            recover(&media, JournalMode::Ordered).meta.namespace.len(),
            1
        );
    }

    #[test]
    fn writeback_exposes_stale_block_as_v0() {
        let key = PageKey {
            ino: InodeId(1),
            index: 0,
        };
        let mut media = MediaImage::new();
        media.insert(
            DeviceBlock::JournalTxn(1),
            BlockContent::Txn(vec![
                MetaOp::Link {
                    path: FilePath::new("d", "f"),
                    ino: InodeId(1),
                },
                MetaOp::Alloc {
                    block: BlockAddr(0),
                },
                MetaOp::Map {
                    key,
                    block: BlockAddr(0),
                },
            ]),
        );
        media.insert(DeviceBlock::JournalCommit(1), BlockContent::Commit);
        let rec = recover(&media, JournalMode::Writeback);
        assert_eq!(rec.view()[&FilePath::new("d", "f")][&0], Version::INITIAL);
        assert_eq!(rec.stale, vec![key]);
        let rec = recover(&media, JournalMode::Ordered);
        assert_eq!(rec.inconsistencies.len(), 1);
    }

    #[test]
    fn recovery_is_pure() {
        let dev = cached(&[(1, false), (2, true), (3, false)]);
        for image in crash_images(&dev) {
            assert_eq!(
                recover(&image, JournalMode::Ordered),
                recover(&image, JournalMode::Ordered)
            );
        }
    }
}
