//! Workloads: the initial on-media files plus an ordered list of syscalls.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::device::{BlockContent, DeviceBlock, DeviceConfig, DeviceState, MediaImage};
use crate::error::{Error, Result};
use crate::fault::Injector;
use crate::model::{
    AppState, BlockAddr, FilePath, FsHealth, FsState, InodeId, JournalTxn, MetaImage, PageKey,
    SyscallResult, SystemState, Version, WriteItem,
};
use crate::syscall::{self, Env};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialFile {
    pub path: FilePath,
    /// Number of pages already durable on media.
    #[serde(default)]
    pub pages: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Op {
    Write {
        path: FilePath,
        #[serde(default)]
        index: u32,
    },
    Fsync {
        path: FilePath,
    },
    FsyncRetry {
        path: FilePath,
    },
    FsyncDir {
        dir: String,
    },
    Rename {
        from: FilePath,
        to: FilePath,
    },
    Create {
        path: FilePath,
        #[serde(default)]
        exclusive: bool,
    },
    Unlink {
        path: FilePath,
    },
    Read {
        path: FilePath,
        #[serde(default)]
        index: u32,
    },
}

impl Op {
    pub fn is_fsync(&self) -> bool {
        matches!(
            self,
            Op::Fsync { .. } | Op::FsyncRetry { .. } | Op::FsyncDir { .. }
        )
    }
}

/// Everything needed to replay a workload deterministically under a schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Harness {
    pub env: Env,
    pub device: DeviceConfig,
    pub initial_files: Vec<InitialFile>,
    pub ops: Vec<Op>,
    /// The application stops at the first syscall that does not return ok.
    pub stop_on_error: bool,
    versions: Vec<Option<Version>>,
    setup_versions: u32,
}

/// States before and after each executed step.
#[derive(Clone, Debug)]
pub struct Run {
    /// `states[0]` is the initial state, `states[i + 1]` follows step `i`.
    pub states: Vec<SystemState>,
    pub results: Vec<SyscallResult>,
    /// `consumed[i]` = fault decisions taken before step `i` began;
    /// `consumed[executed]` = total.
    pub consumed: Vec<usize>,
}

impl Run {
    pub fn executed(&self) -> usize {
        self.results.len()
    }

    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("initial state present")
    }
}

impl Harness {
    pub fn new(
        env: Env,
        device: DeviceConfig,
        initial_files: Vec<InitialFile>,
        ops: Vec<Op>,
        stop_on_error: bool,
    ) -> Result<Harness> {
        device.validate()?;
        if env.sync_writes && !device.fua_supported {
            return Err(Error::Config(
                "sync_writes needs a device with FUA support".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for f in &initial_files {
            if !seen.insert(&f.path) {
                return Err(Error::Config(format!(
                    "initial file {} listed twice",
                    f.path
                )));
            }
        }
        let setup_versions: u32 = initial_files.iter().map(|f| f.pages).sum();
        let mut next = setup_versions + 1;
        let versions = ops
            .iter()
            .map(|op| match op {
                Op::Write { .. } => {
                    let v = Version(next);
                    next += 1;
                    Some(v)
                }
                _ => None,
            })
            .collect();
        Ok(Harness {
            env,
            device,
            initial_files,
            ops,
            stop_on_error,
            versions,
            setup_versions,
        })
    }

    pub fn with_device(&self, device: DeviceConfig) -> Result<Harness> {
        Harness::new(
            self.env.clone(),
            device,
            self.initial_files.clone(),
            self.ops.clone(),
            self.stop_on_error,
        )
    }

    pub fn with_ops(&self, ops: Vec<Op>) -> Result<Harness> {
        Harness::new(
            self.env.clone(),
            self.device,
            self.initial_files.clone(),
            ops,
            self.stop_on_error,
        )
    }

    /// Version written by op `i`, if it is a write.
    pub fn version_of(&self, i: usize) -> Option<Version> {
        self.versions.get(i).copied().flatten()
    }

    /// Version held by page `index` of initial file `path`.
    pub fn initial_version(&self, path: &FilePath, index: u32) -> Option<Version> {
        let mut n = 0;
        for f in &self.initial_files {
            if &f.path == path {
                return (index < f.pages).then(|| Version(n + index + 1));
            }
            n += f.pages;
        }
        None
    }

    /// Default write-set: every version the workload writes.
    pub fn data_writes(&self) -> Vec<WriteItem> {
        self.versions
            .iter()
            .flatten()
            .map(|v| WriteItem::Data(*v))
            .collect()
    }

    pub fn setup_versions(&self) -> u32 {
        self.setup_versions
    }

    pub fn initial_state(&self) -> SystemState {
        let mode = self.env.profile.journal_mode;
        let mut meta = MetaImage::default();
        let mut media = MediaImage::new();
        let mut issued = BTreeMap::new();
        let mut version = 1;
        let mut block = 0;
        for (i, f) in self.initial_files.iter().enumerate() {
            let ino = InodeId(i as u32 + 1);
            meta.namespace.insert(f.path.clone(), ino);
            for index in 0..f.pages {
                let key = PageKey { ino, index };
                let addr = BlockAddr(block);
                block += 1;
                meta.block_map.insert(key, addr);
                meta.allocated.insert(addr);
                media.insert(
                    DeviceBlock::Data(addr),
                    BlockContent::Data(Version(version)),
                );
                issued.insert(Version(version), key);
                version += 1;
            }
        }
        media.insert(DeviceBlock::Superblock, BlockContent::Meta(meta.clone()));
        let fs = FsState {
            mode,
            mem_ns: meta.namespace.clone(),
            block_map: meta.block_map.clone(),
            allocated: meta.allocated.clone(),
            pages: BTreeMap::new(),
            running: JournalTxn::open(1, mode),
            txns: Vec::new(),
            health: FsHealth::Normal,
            error_flags: BTreeSet::new(),
            next_ino: self.initial_files.len() as u32 + 1,
            next_block: block,
        };
        SystemState::new(
            AppState { issued },
            fs,
            DeviceState::with_media(self.device, media),
        )
    }

    pub fn step(
        &self,
        state: &SystemState,
        i: usize,
        inj: &mut Injector,
    ) -> (SystemState, SyscallResult) {
        inj.set_step(i);
        let env = &self.env;
        match &self.ops[i] {
            Op::Write { path, index } => {
                let v = self.version_of(i).expect("write ops carry a version");
                syscall::sys_write(state, path, *index, v, env, inj)
            }
            Op::Fsync { path } => syscall::sys_fsync(state, path, env, inj),
            Op::FsyncRetry { path } => syscall::sys_fsync_retry(state, path, env, inj),
            Op::FsyncDir { dir } => syscall::sys_fsync_dir(state, dir, env, inj),
            Op::Rename { from, to } => syscall::sys_rename(state, from, to, inj),
            Op::Create { path, exclusive } => syscall::sys_create(state, path, *exclusive, inj),
            Op::Unlink { path } => syscall::sys_unlink(state, path, inj),
            Op::Read { path, index } => {
                let (next, v) = syscall::sys_read(state, path, *index);
                (
                    next,
                    if v.is_some() {
                        SyscallResult::Ok
                    } else {
                        SyscallResult::Enoent
                    },
                )
            }
        }
    }

    /// Runs the workload (or its first `limit` ops) under `inj`.
    pub fn run(&self, inj: &mut Injector, limit: Option<usize>) -> Run {
        let n = limit.unwrap_or(self.ops.len()).min(self.ops.len());
        let mut states = vec![self.initial_state()];
        let mut results = Vec::new();
        let mut consumed = vec![0];
        for i in 0..n {
            let (next, code) = self.step(states.last().expect("state"), i, inj);
            states.push(next);
            results.push(code);
            consumed.push(inj.taken().len());
            if self.stop_on_error && !code.is_ok() {
                break;
            }
        }
        Run {
            states,
            results,
            consumed,
        }
    }
}
