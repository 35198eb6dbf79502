//! Application-visible syscalls and the kernel-internal protocol behind them.
//!
//! Every syscall is a pure function from a [`SystemState`] to its successor
//! plus a [`SyscallResult`], and appends exactly one entry to the observable
//! trace. All nondeterminism comes from the [`Injector`], which answers each
//! fault opportunity from a decided schedule.

use serde::{Deserialize, Serialize};

use crate::device::{BlockContent, DeviceBlock, FlushResult};
use crate::fault::{FaultPoint, Injector};
use crate::model::{
    BlockAddr, FilePath, FsHealth, InodeId, JournalTxn, LayerId, MetaOp, Page, PageKey, Syscall,
    SyscallResult, SystemState, TxnPhase, Version,
};
use crate::profile::{FsProfile, JournalMode};

/// Mount-time settings that shape every syscall.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Env {
    pub profile: FsProfile,
    /// O_DSYNC-style write-through: each write is submitted immediately with
    /// FUA. Requires a FUA-capable device.
    pub sync_writes: bool,
}

impl Env {
    pub fn new(profile: FsProfile) -> Self {
        Env {
            profile,
            sync_writes: false,
        }
    }

    fn mode(&self) -> JournalMode {
        self.profile.journal_mode
    }
}

fn finish(
    mut next: SystemState,
    syscall: Syscall,
    code: SyscallResult,
) -> (SystemState, SyscallResult) {
    next.push_trace(syscall, code);
    (next, code)
}

fn aborted(state: &SystemState) -> bool {
    state.fs.health == FsHealth::AbortedReadOnly
}

pub fn sys_write(
    state: &SystemState,
    path: &FilePath,
    index: u32,
    version: Version,
    env: &Env,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = do_write(&mut next, path, index, version, env, inj);
    finish(next, Syscall::Write, code)
}

fn do_write(
    next: &mut SystemState,
    path: &FilePath,
    index: u32,
    version: Version,
    env: &Env,
    inj: &mut Injector,
) -> SyscallResult {
    let Some(ino) = next.resolve(path) else {
        return SyscallResult::Enoent;
    };
    let key = PageKey { ino, index };
    if aborted(next) {
        return SyscallResult::Erofs;
    }
    next.app.issued.insert(version, key);
    let current = read_page(next, path, index).unwrap_or(Version::INITIAL);
    let page = next.fs.pages.entry(key).or_insert(Page {
        version: current,
        dirty: false,
        submitted: false,
        on_disk: current,
    });
    page.version = version;
    page.dirty = true;
    inj.note(
        next,
        LayerId::PageCache,
        format!("write {key} {version}: page dirty"),
        None,
    );
    if env.sync_writes {
        let fua = next.device.config.fua_supported;
        if !submit_page(next, key, env, inj, fua) {
            return report_error(next, ino, env);
        }
    }
    SyscallResult::Ok
}

/// Delayed allocation: a page gets its block when it is first submitted.
fn allocate(next: &mut SystemState, key: PageKey, inj: &mut Injector) -> BlockAddr {
    if let Some(block) = next.fs.block_map.get(&key) {
        return *block;
    }
    let block = BlockAddr(next.fs.next_block);
    next.fs.next_block += 1;
    next.fs.block_map.insert(key, block);
    next.fs.allocated.insert(block);
    next.fs.running.ops.push(MetaOp::Alloc { block });
    next.fs.running.ops.push(MetaOp::Map { key, block });
    inj.note(
        next,
        LayerId::FilesystemJournal,
        format!("allocate block {} for {key}", block.0),
        None,
    );
    block
}

/// Sends one cached page to the device. Returns false when the submission
/// was failed by an injected F1 fault.
fn submit_page(
    next: &mut SystemState,
    key: PageKey,
    env: &Env,
    inj: &mut Injector,
    fua: bool,
) -> bool {
    let block = allocate(next, key, inj);
    let profile = &env.profile;
    let page = next
        .fs
        .pages
        .get_mut(&key)
        .expect("submitted page is cached");
    let version = page.version;
    page.submitted = true;
    if profile.clears_dirty_on_submit {
        page.dirty = false;
    }
    inj.note(
        next,
        LayerId::PageCache,
        format!("submit {key} {version} to block {}: dirty->clean", block.0),
        None,
    );
    if inj.decide(FaultPoint::F1, format!("data write {key} {version}")) {
        next.fs.error_flags.insert(key.ino);
        let page = next.fs.pages.get_mut(&key).expect("page");
        page.submitted = false;
        if profile.restores_dirty_on_failure {
            page.dirty = true;
        }
        if profile.reverts_content_on_failure {
            page.version = page.on_disk;
            page.dirty = false;
        }
        let after = format!(
            "device write of {version} to block {} failed; page {} {}",
            block.0,
            page.version,
            if page.dirty { "dirty" } else { "clean" }
        );
        inj.note(next, LayerId::BlockLayer, after, Some(FaultPoint::F1));
        return false;
    }
    next.device = next
        .device
        .submit_write(DeviceBlock::Data(block), BlockContent::Data(version), fua)
        .expect("FUA only requested on capable devices");
    let page = next.fs.pages.get_mut(&key).expect("page");
    page.submitted = false;
    page.on_disk = version;
    if !profile.clears_dirty_on_submit {
        page.dirty = false;
    }
    let layer = if next.device.cache.is_empty() {
        LayerId::PersistentMedia
    } else {
        LayerId::ControllerCache
    };
    inj.note(next, layer, format!("block {} <- {version}", block.0), None);
    true
}

/// data=journal: the page contents ride inside the running transaction.
fn journal_page(next: &mut SystemState, key: PageKey, inj: &mut Injector) {
    let block = allocate(next, key, inj);
    let page = next
        .fs
        .pages
        .get_mut(&key)
        .expect("journaled page is cached");
    let version = page.version;
    page.dirty = false;
    page.on_disk = version;
    next.fs.running.ops.push(MetaOp::JournaledData {
        key,
        block,
        version,
    });
    inj.note(
        next,
        LayerId::FilesystemJournal,
        format!("journal data {key} {version}"),
        None,
    );
}

fn flush(next: &mut SystemState, inj: &mut Injector, site: &str) -> bool {
    let fail = inj.decide(FaultPoint::F3, format!("flush ({site})"));
    let (device, res) = next.device.issue_flush(fail);
    next.device = device;
    match res {
        FlushResult::Success => {
            inj.note(
                next,
                LayerId::ControllerCache,
                format!("flush ({site}) ok"),
                None,
            );
            true
        }
        FlushResult::Failed => {
            inj.note(
                next,
                LayerId::ControllerCache,
                format!("flush ({site}) failed"),
                Some(FaultPoint::F3),
            );
            false
        }
    }
}

/// Logs the running transaction, flushes, then writes its commit record.
fn commit_running(
    next: &mut SystemState,
    env: &Env,
    inj: &mut Injector,
) -> Result<(), SyscallResult> {
    if next.fs.running.ops.is_empty() {
        return Ok(());
    }
    let id = next.fs.running.id;
    let mut txn = std::mem::replace(&mut next.fs.running, JournalTxn::open(id + 1, env.mode()));
    let mut requeued = false;
    loop {
        if !inj.decide(FaultPoint::F2, format!("journal block txn {id}")) {
            break;
        }
        if env.profile.retries_metadata && !requeued {
            requeued = true;
            inj.note(
                next,
                LayerId::FilesystemJournal,
                format!("journal block txn {id} failed; re-queued"),
                Some(FaultPoint::F2),
            );
            continue;
        }
        next.fs.health = FsHealth::AbortedReadOnly;
        next.fs.running = txn;
        inj.note(
            next,
            LayerId::FilesystemJournal,
            format!("journal block txn {id} failed; filesystem aborted read-only"),
            Some(FaultPoint::F2),
        );
        return Err(SyscallResult::Eio);
    }
    next.device = next
        .device
        .submit_write(
            DeviceBlock::JournalTxn(id),
            BlockContent::Txn(txn.ops.clone()),
            false,
        )
        .expect("plain write");
    txn.phase = TxnPhase::Logged;
    next.fs.txns.push(txn);
    inj.note(
        next,
        LayerId::FilesystemJournal,
        format!("txn {id} logged"),
        None,
    );
    if !flush(next, inj, "journal pre-commit") {
        return Err(SyscallResult::Eio);
    }
    let fua = next.device.config.fua_supported;
    next.device = next
        .device
        .submit_write(DeviceBlock::JournalCommit(id), BlockContent::Commit, fua)
        .expect("FUA only requested on capable devices");
    if let Some(t) = next.fs.txns.iter_mut().find(|t| t.id == id) {
        t.phase = TxnPhase::CommitRecordWritten;
    }
    inj.note(
        next,
        LayerId::FilesystemJournal,
        format!(
            "txn {id} commit record written{}",
            if fua { " (FUA)" } else { "" }
        ),
        None,
    );
    Ok(())
}

fn checkpoint(next: &mut SystemState) {
    let image = next.device.durable_image();
    for txn in &mut next.fs.txns {
        if txn.phase == TxnPhase::CommitRecordWritten
            && image.contains_key(&DeviceBlock::JournalCommit(txn.id))
        {
            txn.phase = TxnPhase::Checkpointed;
        }
    }
}

/// Surfaces the per-file error flag, clearing it on first report when the
/// profile does.
fn report_error(next: &mut SystemState, ino: InodeId, env: &Env) -> SyscallResult {
    if env.profile.error_flag_cleared_after_first_report {
        next.fs.error_flags.remove(&ino);
    }
    SyscallResult::Eio
}

fn dirty_pages(state: &SystemState, ino: InodeId) -> Vec<PageKey> {
    state
        .fs
        .pages
        .iter()
        .filter(|(k, p)| k.ino == ino && p.dirty)
        .map(|(k, _)| *k)
        .collect()
}

pub fn sys_fsync(
    state: &SystemState,
    path: &FilePath,
    env: &Env,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = do_fsync(&mut next, path, env, inj);
    finish(next, Syscall::Fsync, code)
}

/// fsync issued after an earlier fsync on the same file reported EIO. It is
/// the same transition; the alias keeps retry scenarios explicit.
pub fn sys_fsync_retry(
    state: &SystemState,
    path: &FilePath,
    env: &Env,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    sys_fsync(state, path, env, inj)
}

fn do_fsync(
    next: &mut SystemState,
    path: &FilePath,
    env: &Env,
    inj: &mut Injector,
) -> SyscallResult {
    if aborted(next) {
        return SyscallResult::Erofs;
    }
    let Some(ino) = next.resolve(path) else {
        return SyscallResult::Enoent;
    };
    let dirty = dirty_pages(next, ino);
    let idle = dirty.is_empty() && next.fs.running.ops.is_empty();
    let mut failed = false;
    for key in dirty {
        if env.mode() == JournalMode::Journal {
            journal_page(next, key, inj);
        } else if !submit_page(next, key, env, inj, false) {
            failed = true;
        }
    }
    if failed {
        return report_error(next, ino, env);
    }
    if let Err(code) = commit_running(next, env, inj) {
        return code;
    }
    if !idle && !flush(next, inj, "fsync") {
        return SyscallResult::Eio;
    }
    checkpoint(next);
    if next.fs.error_flags.contains(&ino) {
        return report_error(next, ino, env);
    }
    SyscallResult::Ok
}

pub fn sys_fsync_dir(
    state: &SystemState,
    dir: &str,
    env: &Env,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = do_fsync_dir(&mut next, dir, env, inj);
    finish(next, Syscall::FsyncDir, code)
}

fn do_fsync_dir(
    next: &mut SystemState,
    _dir: &str,
    env: &Env,
    inj: &mut Injector,
) -> SyscallResult {
    if aborted(next) {
        return SyscallResult::Erofs;
    }
    // The journal has a single running transaction, so committing the
    // directory's metadata commits everything pending.
    if next.fs.running.ops.is_empty() {
        return SyscallResult::Ok;
    }
    if let Err(code) = commit_running(next, env, inj) {
        return code;
    }
    if !flush(next, inj, "fsync-dir") {
        return SyscallResult::Eio;
    }
    checkpoint(next);
    SyscallResult::Ok
}

pub fn sys_rename(
    state: &SystemState,
    from: &FilePath,
    to: &FilePath,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = if aborted(&next) {
        SyscallResult::Erofs
    } else if let Some(ino) = next.fs.mem_ns.remove(from) {
        next.fs.mem_ns.insert(to.clone(), ino);
        next.fs.running.ops.push(MetaOp::Rename {
            from: from.clone(),
            to: to.clone(),
        });
        inj.note(
            &next,
            LayerId::FilesystemJournal,
            format!("rename {from} -> {to} (uncommitted)"),
            None,
        );
        SyscallResult::Ok
    } else {
        SyscallResult::Enoent
    };
    finish(next, Syscall::Rename, code)
}

pub fn sys_create(
    state: &SystemState,
    path: &FilePath,
    exclusive: bool,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = if aborted(&next) {
        SyscallResult::Erofs
    } else if next.fs.mem_ns.contains_key(path) {
        if exclusive {
            SyscallResult::Eexist
        } else {
            SyscallResult::Ok
        }
    } else {
        let ino = InodeId(next.fs.next_ino);
        next.fs.next_ino += 1;
        next.fs.mem_ns.insert(path.clone(), ino);
        next.fs.running.ops.push(MetaOp::Link {
            path: path.clone(),
            ino,
        });
        inj.note(
            &next,
            LayerId::FilesystemJournal,
            format!("create {path} as ino{} (uncommitted)", ino.0),
            None,
        );
        SyscallResult::Ok
    };
    finish(next, Syscall::Create, code)
}

pub fn sys_unlink(
    state: &SystemState,
    path: &FilePath,
    inj: &mut Injector,
) -> (SystemState, SyscallResult) {
    let mut next = state.clone();
    let code = if aborted(&next) {
        SyscallResult::Erofs
    } else if next.fs.mem_ns.remove(path).is_some() {
        // Only the binding goes; pages and blocks stay until checkpoint.
        next.fs
            .running
            .ops
            .push(MetaOp::Unlink { path: path.clone() });
        inj.note(
            &next,
            LayerId::FilesystemJournal,
            format!("unlink {path} (uncommitted)"),
            None,
        );
        SyscallResult::Ok
    } else {
        SyscallResult::Enoent
    };
    finish(next, Syscall::Unlink, code)
}

/// Reads one page through the in-memory namespace. Cached pages win; otherwise
/// the device returns its newest copy of the block. Unwritten pages read as v0.
pub fn sys_read(
    state: &SystemState,
    path: &FilePath,
    index: u32,
) -> (SystemState, Option<Version>) {
    let mut next = state.clone();
    let value = read_page(state, path, index);
    let code = if value.is_some() {
        SyscallResult::Ok
    } else {
        SyscallResult::Enoent
    };
    next.push_trace(Syscall::Read, code);
    (next, value)
}

pub fn read_page(state: &SystemState, path: &FilePath, index: u32) -> Option<Version> {
    let ino = state.resolve(path)?;
    let key = PageKey { ino, index };
    if let Some(page) = state.page(key) {
        return Some(page.version);
    }
    let Some(block) = state.fs.block_map.get(&key) else {
        return Some(Version::INITIAL);
    };
    let target = DeviceBlock::Data(*block);
    let cached = state
        .device
        .cache
        .iter()
        .rev()
        .find(|w| w.block == target)
        .map(|w| &w.content);
    match cached.or_else(|| state.device.media.get(&target)) {
        Some(BlockContent::Data(v)) => Some(*v),
        _ => Some(Version::INITIAL),
    }
}

/// Kernel activity that may happen between syscalls without the application
/// asking: periodic writeback of dirty pages and the periodic journal commit.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Idle,
    Writeback,
    Commit,
    WritebackAndCommit,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Idle,
        Background::Writeback,
        Background::Commit,
        Background::WritebackAndCommit,
    ];
}

/// Applies fault-free background progress. In data=ordered the commit waits
/// for the data it covers; in data=writeback the data I/O races the commit
/// and is issued after the commit's ordering flush.
pub fn background(state: &SystemState, env: &Env, which: Background) -> SystemState {
    let mut next = state.clone();
    if aborted(&next) || which == Background::Idle {
        return next;
    }
    let mut inj = Injector::passive();
    let writeback = matches!(
        which,
        Background::Writeback | Background::WritebackAndCommit
    );
    let commit = matches!(which, Background::Commit | Background::WritebackAndCommit);
    let dirty: Vec<PageKey> = next
        .fs
        .pages
        .iter()
        .filter(|(_, p)| p.dirty)
        .map(|(k, _)| *k)
        .collect();
    match env.mode() {
        // Dirty data only leaves memory through the journal, so plain
        // writeback has nothing to do here.
        JournalMode::Journal => {
            if commit {
                for key in &dirty {
                    journal_page(&mut next, *key, &mut inj);
                }
                let _ = commit_running(&mut next, env, &mut inj);
            }
        }
        JournalMode::Ordered => {
            if writeback {
                for key in &dirty {
                    submit_page(&mut next, *key, env, &mut inj, false);
                }
            }
            if commit {
                let _ = commit_running(&mut next, env, &mut inj);
            }
        }
        JournalMode::Writeback => {
            if writeback {
                for key in &dirty {
                    allocate(&mut next, *key, &mut inj);
                }
            }
            if commit {
                let _ = commit_running(&mut next, env, &mut inj);
            }
            if writeback {
                for key in &dirty {
                    submit_page(&mut next, *key, env, &mut inj, false);
                }
            }
        }
    }
    next
}
