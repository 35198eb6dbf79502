//! Six-layer persistence state.
//!
//! Contents are symbolic [`Version`] tokens rather than bytes, which keeps the
//! set of crash states finite and makes "old vs new content" decidable. A
//! [`SystemState`] is an immutable value: every transition in
//! [`crate::syscall`] clones it and returns the successor.
//!
//! Durability of a write-set is the conjunction of [`layer_committed`] over
//! all six [`LayerId`]s, where a layer is committed for a write-set when no
//! effect of that write-set is still pending at the layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{BlockContent, DeviceBlock, DeviceState, MediaImage};
use crate::error::{Error, Result};
use crate::fault::recover;
use crate::profile::JournalMode;

/// Write generation of one page. `v0` is whatever the media held before the
/// application wrote anything (including stale contents of a fresh block).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Version(pub u32);

impl Version {
    pub const INITIAL: Version = Version(0);
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InodeId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockAddr(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PageKey {
    pub ino: InodeId,
    pub index: u32,
}

impl fmt::Display for PageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ino{}#{}", self.ino.0, self.index)
    }
}

impl FromStr for PageKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed = s
            .strip_prefix("ino")
            .and_then(|rest| rest.split_once('#'))
            .and_then(|(ino, index)| {
                Some(PageKey {
                    ino: InodeId(ino.parse().ok()?),
                    index: index.parse().ok()?,
                })
            });
        parsed.ok_or_else(|| Error::Config(format!("page key {s:?} must look like ino3#0")))
    }
}

impl TryFrom<String> for PageKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PageKey> for String {
    fn from(k: PageKey) -> String {
        k.to_string()
    }
}

/// A `dir/name` pair. Directories are flat names; there is no nesting.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FilePath {
    pub dir: String,
    pub name: String,
}

impl FilePath {
    pub fn new(dir: impl Into<String>, name: impl Into<String>) -> Self {
        FilePath {
            dir: dir.into(),
            name: name.into(),
        }
    }
}

impl FromStr for FilePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((dir, name)) if !dir.is_empty() && !name.is_empty() && !name.contains('/') => {
                Ok(FilePath::new(dir, name))
            }
            _ => Err(Error::Config(format!(
                "path {s:?} must have the form dir/name"
            ))),
        }
    }
}

impl TryFrom<String> for FilePath {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FilePath> for String {
    fn from(p: FilePath) -> String {
        p.to_string()
    }
}

impl fmt::Display for FilePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dir, self.name)
    }
}

pub type Namespace = BTreeMap<FilePath, InodeId>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerId {
    Application,
    PageCache,
    FilesystemJournal,
    BlockLayer,
    ControllerCache,
    PersistentMedia,
}

impl LayerId {
    pub const ALL: [LayerId; 6] = [
        LayerId::Application,
        LayerId::PageCache,
        LayerId::FilesystemJournal,
        LayerId::BlockLayer,
        LayerId::ControllerCache,
        LayerId::PersistentMedia,
    ];
}

/// Cached copy of one page. `on_disk` is the last version whose submission
/// completed without error; btrfs-style reversion restores it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub version: Version,
    pub dirty: bool,
    pub submitted: bool,
    pub on_disk: Version,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum MetaOp {
    Link {
        path: FilePath,
        ino: InodeId,
    },
    Unlink {
        path: FilePath,
    },
    Rename {
        from: FilePath,
        to: FilePath,
    },
    Alloc {
        block: BlockAddr,
    },
    Map {
        key: PageKey,
        block: BlockAddr,
    },
    /// data=journal: page contents travel inside the transaction.
    JournaledData {
        key: PageKey,
        block: BlockAddr,
        version: Version,
    },
}

impl MetaOp {
    pub fn touches(&self, path: &FilePath) -> bool {
        match self {
            MetaOp::Link { path: p, .. } | MetaOp::Unlink { path: p } => p == path,
            MetaOp::Rename { from, to } => from == path || to == path,
            _ => false,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxnPhase {
    Open,
    Logged,
    CommitRecordWritten,
    Checkpointed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalTxn {
    pub id: u32,
    pub ops: Vec<MetaOp>,
    pub phase: TxnPhase,
    pub mode: JournalMode,
}

impl JournalTxn {
    pub fn open(id: u32, mode: JournalMode) -> Self {
        JournalTxn {
            id,
            ops: Vec::new(),
            phase: TxnPhase::Open,
            mode,
        }
    }
}

/// Metadata image stored in the superblock: the checkpointed namespace and
/// block maps. Journal replay starts from here.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetaImage {
    pub namespace: Namespace,
    pub block_map: BTreeMap<PageKey, BlockAddr>,
    pub allocated: BTreeSet<BlockAddr>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsHealth {
    Normal,
    AbortedReadOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Syscall {
    Write,
    Fsync,
    FsyncDir,
    Rename,
    Create,
    Unlink,
    Read,
}

impl fmt::Display for Syscall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Syscall::Write => "write",
            Syscall::Fsync => "fsync",
            Syscall::FsyncDir => "fsync-dir",
            Syscall::Rename => "rename",
            Syscall::Create => "create",
            Syscall::Unlink => "unlink",
            Syscall::Read => "read",
        };
        f.write_str(s)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SyscallResult {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "EIO")]
    Eio,
    #[serde(rename = "EROFS")]
    Erofs,
    #[serde(rename = "ENOENT")]
    Enoent,
    #[serde(rename = "EEXIST")]
    Eexist,
}

impl SyscallResult {
    pub fn is_ok(self) -> bool {
        self == SyscallResult::Ok
    }
}

impl fmt::Display for SyscallResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyscallResult::Ok => "ok",
            SyscallResult::Eio => "EIO",
            SyscallResult::Erofs => "EROFS",
            SyscallResult::Enoent => "ENOENT",
            SyscallResult::Eexist => "EEXIST",
        };
        f.write_str(s)
    }
}

/// One observable event: the syscall and what it returned. Nothing else is
/// visible to the application.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub syscall: Syscall,
    pub code: SyscallResult,
}

impl TraceEntry {
    pub fn new(syscall: Syscall, code: SyscallResult) -> Self {
        TraceEntry { syscall, code }
    }
}

pub type Trace = Vec<TraceEntry>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppState {
    /// Every version the application has handed to the kernel, with the page
    /// it was written to.
    pub issued: BTreeMap<Version, PageKey>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsState {
    pub mode: JournalMode,
    pub mem_ns: Namespace,
    pub block_map: BTreeMap<PageKey, BlockAddr>,
    pub allocated: BTreeSet<BlockAddr>,
    pub pages: BTreeMap<PageKey, Page>,
    pub running: JournalTxn,
    /// Transactions that left the running state, in log order.
    pub txns: Vec<JournalTxn>,
    pub health: FsHealth,
    pub error_flags: BTreeSet<InodeId>,
    pub next_ino: u32,
    pub next_block: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemState {
    pub app: AppState,
    pub fs: FsState,
    pub device: DeviceState,
    trace: Trace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamespaceTier {
    InMemory,
    Journaled,
    OnMedia,
}

impl SystemState {
    pub fn new(app: AppState, fs: FsState, device: DeviceState) -> Self {
        SystemState {
            app,
            fs,
            device,
            trace: Vec::new(),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub(crate) fn push_trace(&mut self, syscall: Syscall, code: SyscallResult) {
        self.trace.push(TraceEntry::new(syscall, code));
    }

    pub fn resolve(&self, path: &FilePath) -> Option<InodeId> {
        self.fs.mem_ns.get(path).copied()
    }

    pub fn page(&self, key: PageKey) -> Option<&Page> {
        self.fs.pages.get(&key)
    }

    pub fn namespace_view(&self, tier: NamespaceTier) -> Namespace {
        match tier {
            NamespaceTier::InMemory => self.fs.mem_ns.clone(),
            NamespaceTier::Journaled => {
                let mut meta = self.superblock();
                for txn in &self.fs.txns {
                    crate::fault::apply_ops(&mut meta, &txn.ops, &mut Vec::new());
                }
                meta.namespace
            }
            NamespaceTier::OnMedia => {
                recover(&self.device.durable_image(), self.fs.mode)
                    .meta
                    .namespace
            }
        }
    }

    pub(crate) fn superblock(&self) -> MetaImage {
        match self.device.durable_image().get(&DeviceBlock::Superblock) {
            Some(BlockContent::Meta(m)) => m.clone(),
            _ => MetaImage::default(),
        }
    }

    /// Short stable digest of the whole state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        let hash = Sha256::digest(&bytes);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Member of a write-set: a data version or a namespace binding whose
/// in-memory target must reach media.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WriteItem {
    Data(Version),
    Binding(FilePath),
}

fn image_holds_version(image: &MediaImage, v: Version) -> bool {
    image.iter().any(|(block, content)| match content {
        BlockContent::Data(held) => *held == v,
        BlockContent::Txn(ops) => {
            let DeviceBlock::JournalTxn(id) = block else {
                return false;
            };
            image.contains_key(&DeviceBlock::JournalCommit(*id))
                && ops
                    .iter()
                    .any(|op| matches!(op, MetaOp::JournaledData { version, .. } if *version == v))
        }
        _ => false,
    })
}

fn content_mentions(content: &BlockContent, item: &WriteItem, txn_ops: Option<&[MetaOp]>) -> bool {
    match (item, content) {
        (WriteItem::Data(v), BlockContent::Data(held)) => held == v,
        (WriteItem::Data(v), BlockContent::Txn(ops)) => ops
            .iter()
            .any(|op| matches!(op, MetaOp::JournaledData { version, .. } if version == v)),
        (WriteItem::Binding(path), BlockContent::Txn(ops)) => ops.iter().any(|op| op.touches(path)),
        (WriteItem::Binding(path), BlockContent::Commit) => {
            txn_ops.is_some_and(|ops| ops.iter().any(|op| op.touches(path)))
        }
        _ => false,
    }
}

fn txn_mentions(txn: &JournalTxn, item: &WriteItem) -> bool {
    txn.ops.iter().any(|op| match (item, op) {
        (WriteItem::Data(v), MetaOp::JournaledData { version, .. }) => version == v,
        (WriteItem::Binding(path), op) => op.touches(path),
        _ => false,
    })
}

fn check_known(state: &SystemState, writes: &[WriteItem]) -> Result<()> {
    for item in writes {
        if let WriteItem::Data(v) = item {
            if !state.app.issued.contains_key(v) {
                return Err(Error::UnknownWrite(v.to_string()));
            }
        }
    }
    Ok(())
}

/// True iff no effect of `writes` remains pending at `layer`.
pub fn layer_committed(state: &SystemState, layer: LayerId, writes: &[WriteItem]) -> Result<bool> {
    check_known(state, writes)?;
    let durable_image = state.device.durable_image();
    let committed = writes.iter().all(|item| match layer {
        // Once a syscall has returned, the application holds nothing back.
        LayerId::Application => true,
        LayerId::PageCache => match item {
            WriteItem::Data(v) => {
                let key = state.app.issued[v];
                !state.page(key).is_some_and(|p| p.dirty && p.version == *v)
            }
            WriteItem::Binding(_) => true,
        },
        LayerId::FilesystemJournal => {
            let running = txn_mentions(&state.fs.running, item);
            let unsealed = state.fs.txns.iter().any(|txn| {
                txn_mentions(txn, item)
                    && !durable_image.contains_key(&DeviceBlock::JournalCommit(txn.id))
            });
            !running && !unsealed
        }
        // Block-layer submission completes synchronously in this model, so
        // nothing ever waits in a queue here.
        LayerId::BlockLayer => true,
        LayerId::ControllerCache => {
            state.device.config.plp
                || !state.device.cache.iter().any(|w| {
                    let ops = match w.block {
                        DeviceBlock::JournalCommit(id) => state
                            .fs
                            .txns
                            .iter()
                            .find(|t| t.id == id)
                            .map(|t| t.ops.as_slice()),
                        _ => None,
                    };
                    content_mentions(&w.content, item, ops)
                })
        }
        LayerId::PersistentMedia => match item {
            WriteItem::Data(v) => image_holds_version(&durable_image, *v),
            WriteItem::Binding(path) => {
                let expected = state.resolve(path);
                recover(&durable_image, state.fs.mode)
                    .meta
                    .namespace
                    .get(path)
                    .copied()
                    == expected
            }
        },
    });
    Ok(committed)
}

/// Data-durability: every layer committed for `writes`.
pub fn durable(state: &SystemState, writes: &[WriteItem]) -> Result<bool> {
    for layer in LayerId::ALL {
        if !layer_committed(state, layer, writes)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Durability plus reachability: each data version is also what recovery
/// would return for its page, through a bound path.
pub fn reachable_durable(state: &SystemState, writes: &[WriteItem]) -> Result<bool> {
    if !durable(state, writes)? {
        return Ok(false);
    }
    let recovered = recover(&state.device.durable_image(), state.fs.mode);
    let reachable: BTreeSet<InodeId> = recovered.meta.namespace.values().copied().collect();
    Ok(writes.iter().all(|item| match item {
        WriteItem::Data(v) => {
            let key = state.app.issued[v];
            reachable.contains(&key.ino) && recovered.contents.get(&key) == Some(v)
        }
        WriteItem::Binding(_) => true,
    }))
}

pub fn observable_trace(state: &SystemState) -> Trace {
    state.trace.clone()
}

/// Every data page of the write-set is cached and clean.
pub fn all_clean(state: &SystemState, writes: &[WriteItem]) -> bool {
    writes.iter().all(|item| match item {
        WriteItem::Data(v) => state
            .app
            .issued
            .get(v)
            .and_then(|key| state.page(*key))
            .is_some_and(|p| !p.dirty),
        WriteItem::Binding(_) => true,
    })
}
