//! Block layer, controller cache and media.
//!
//! A write that is neither FUA nor sent to a device without an active cache
//! sits in the controller cache until a flush moves it to media. With power
//! loss protection the cache is non-volatile: flush has nothing to do and a
//! power cut merges the cache into media instead of discarding it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockAddr, MetaImage, MetaOp, Version};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub volatile_cache_present: bool,
    pub volatile_cache_enabled: bool,
    pub fua_supported: bool,
    pub plp: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            volatile_cache_present: true,
            volatile_cache_enabled: true,
            fua_supported: false,
            plp: false,
        }
    }
}

impl DeviceConfig {
    pub const NO_CACHE: DeviceConfig = DeviceConfig {
        volatile_cache_present: false,
        volatile_cache_enabled: false,
        fua_supported: false,
        plp: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.volatile_cache_enabled && !self.volatile_cache_present {
            return Err(Error::Config(
                "volatile_cache_enabled requires volatile_cache_present".into(),
            ));
        }
        Ok(())
    }

    /// Writes are acknowledged from the cache rather than media.
    pub fn caching(&self) -> bool {
        self.volatile_cache_present && self.volatile_cache_enabled
    }

    /// Acknowledged-but-unflushed data can be lost on power failure.
    pub fn volatile(&self) -> bool {
        self.caching() && !self.plp
    }
}

/// Address space of the simulated device.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DeviceBlock {
    Superblock,
    Data(BlockAddr),
    JournalTxn(u32),
    JournalCommit(u32),
}

impl fmt::Display for DeviceBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceBlock::Superblock => f.write_str("superblock"),
            DeviceBlock::Data(b) => write!(f, "data:{}", b.0),
            DeviceBlock::JournalTxn(id) => write!(f, "txn:{id}"),
            DeviceBlock::JournalCommit(id) => write!(f, "commit:{id}"),
        }
    }
}

impl TryFrom<String> for DeviceBlock {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s == "superblock" {
            return Ok(DeviceBlock::Superblock);
        }
        let bad = || Error::Config(format!("unknown device block {s:?}"));
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: u32 = n.parse().map_err(|_| bad())?;
        match kind {
            "data" => Ok(DeviceBlock::Data(BlockAddr(n))),
            "txn" => Ok(DeviceBlock::JournalTxn(n)),
            "commit" => Ok(DeviceBlock::JournalCommit(n)),
            _ => Err(bad()),
        }
    }
}

impl From<DeviceBlock> for String {
    fn from(b: DeviceBlock) -> String {
        b.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockContent {
    Meta(MetaImage),
    Data(Version),
    Txn(Vec<MetaOp>),
    Commit,
}

pub type MediaImage = BTreeMap<DeviceBlock, BlockContent>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWrite {
    pub block: DeviceBlock,
    pub content: BlockContent,
    pub fua: bool,
    /// Number of completed flushes before this write was submitted.
    pub epoch: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub config: DeviceConfig,
    pub media: MediaImage,
    /// Acknowledged writes not yet on media, in submission order.
    pub cache: Vec<BlockWrite>,
    pub epoch: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlushResult {
    Success,
    Failed,
}

impl DeviceState {
    pub fn new(config: DeviceConfig) -> Self {
        DeviceState {
            config,
            media: MediaImage::new(),
            cache: Vec::new(),
            epoch: 0,
        }
    }

    pub fn with_media(config: DeviceConfig, media: MediaImage) -> Self {
        DeviceState {
            media,
            ..DeviceState::new(config)
        }
    }

    pub fn submit_write(
        &self,
        block: DeviceBlock,
        content: BlockContent,
        fua: bool,
    ) -> Result<DeviceState> {
        if fua && !self.config.fua_supported {
            return Err(Error::Config(
                "FUA write on a device without FUA support".into(),
            ));
        }
        let mut next = self.clone();
        if fua || !next.config.caching() {
            next.media.insert(block, content);
        } else {
            next.cache.push(BlockWrite {
                block,
                content,
                fua,
                epoch: self.epoch,
            });
        }
        Ok(next)
    }

    /// Drains a volatile cache to media. A failed flush leaves both the cache
    /// and the epoch untouched; a vacuous one still counts as an ordering point.
    /// Without a volatile cache it succeeds and changes nothing.
    pub fn issue_flush(&self, fail: bool) -> (DeviceState, FlushResult) {
        if fail {
            return (self.clone(), FlushResult::Failed);
        }
        let mut next = self.clone();
        if next.config.volatile() {
            for w in std::mem::take(&mut next.cache) {
                next.media.insert(w.block, w.content);
            }
            next.epoch += 1;
        }
        (next, FlushResult::Success)
    }

    /// Media contents after the power goes out with nothing in flight.
    pub fn power_loss(&self) -> MediaImage {
        if self.config.plp {
            self.durable_image()
        } else {
            self.media.clone()
        }
    }

    /// Contents guaranteed to survive a power cut right now.
    pub fn durable_image(&self) -> MediaImage {
        let mut image = self.media.clone();
        if self.config.plp {
            for w in &self.cache {
                image.insert(w.block, w.content.clone());
            }
        }
        image
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Query {
    Q1,
    Q2,
    Q3,
    Q4,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query: Query,
    pub answer: bool,
    pub explanation: String,
}

/// Q1: volatile cache present. Q2: volatile caching enabled. Q3: FUA
/// supported. Q4: a failed fsync leaves a well-defined epistemic state, i.e.
/// the commit-boundary check finds no witness for `harness` under `bounds`.
pub fn verify_q(
    harness: &crate::workload::Harness,
    writes: &[crate::model::WriteItem],
    bounds: &crate::fault::Bounds,
    which: Query,
) -> Result<QueryAnswer> {
    let config = &harness.device;
    let (answer, explanation) = match which {
        Query::Q1 => (
            config.volatile_cache_present,
            "identify: volatile write cache present".to_string(),
        ),
        Query::Q2 => (
            config.volatile_cache_enabled,
            "volatile write cache feature enabled".to_string(),
        ),
        Query::Q3 => (
            config.fua_supported,
            "stack supports FUA writes".to_string(),
        ),
        Query::Q4 => {
            let mut bounds = bounds.clone();
            bounds.max_faults = bounds.max_faults.max(1);
            bounds.allow_crash = false;
            let report = crate::checker::check_commit_boundary(harness, writes, &bounds)?;
            let ok = report.witnesses.is_empty();
            let why = if ok {
                "every observable trace has a single durability verdict".to_string()
            } else {
                format!(
                    "{} observable trace(s) admit both durable and non-durable states",
                    report.witnesses.len()
                )
            };
            (ok, why)
        }
    };
    Ok(QueryAnswer {
        query: which,
        answer,
        explanation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: u32) -> (DeviceBlock, BlockContent) {
        (
            DeviceBlock::Data(BlockAddr(n)),
            BlockContent::Data(Version(n)),
        )
    }

    #[test]
    fn fua_write_lands_on_media_despite_cache() {
        let cfg = DeviceConfig {
            fua_supported: true,
            ..DeviceConfig::default()
        };
        let (b, c) = data(1);
        let dev = DeviceState::new(cfg)
            .submit_write(b, c.clone(), true)
            .unwrap();
        assert!(dev.cache.is_empty());
        assert_eq!(dev.power_loss().get(&b), Some(&c));
    }

    #[test]
    fn fua_requires_support() {
        let (b, c) = data(1);
        assert!(DeviceState::new(DeviceConfig::default())
            .submit_write(b, c, true)
            .is_err());
    }

    #[test]
    fn plain_write_into_volatile_cache_is_lost() {
        let (b, c) = data(1);
        let dev = DeviceState::new(DeviceConfig::default())
            .submit_write(b, c, false)
            .unwrap();
        assert_eq!(dev.cache.len(), 1);
        assert!(dev.power_loss().is_empty());
    }

    #[test]
    fn plain_write_without_cache_is_durable() {
        let (b, c) = data(1);
        let dev = DeviceState::new(DeviceConfig::NO_CACHE)
            .submit_write(b, c, false)
            .unwrap();
        assert!(dev.cache.is_empty());
        assert_eq!(dev.power_loss().len(), 1);
    }

    #[test]
    fn flush_without_cache_changes_nothing() {
        let dev = DeviceState::new(DeviceConfig::NO_CACHE);
        let (after, res) = dev.issue_flush(false);
        assert_eq!(res, FlushResult::Success);
        assert_eq!(after, dev);
    }

    #[test]
    fn flush_drains_three_pending() {
        let mut dev = DeviceState::new(DeviceConfig::default());
        for n in 1..=3 {
            let (b, c) = data(n);
            dev = dev.submit_write(b, c, false).unwrap();
        }
        let (after, res) = dev.issue_flush(false);
        assert_eq!(res, FlushResult::Success);
        assert!(after.cache.is_empty());
        assert_eq!(after.media.len(), 3);
    }

    #[test]
    fn failed_flush_keeps_cache_and_epoch() {
        let (b, c) = data(1);
        let dev = DeviceState::new(DeviceConfig::default())
            .submit_write(b, c, false)
            .unwrap();
        let (after, res) = dev.issue_flush(true);
        assert_eq!(res, FlushResult::Failed);
        assert_eq!(after, dev);
    }

    #[test]
    fn plp_cache_survives_power_loss() {
        let cfg = DeviceConfig {
            plp: true,
            ..DeviceConfig::default()
        };
        let (b, c) = data(1);
        let dev = DeviceState::new(cfg)
            .submit_write(b, c.clone(), false)
            .unwrap();
        assert_eq!(dev.power_loss().get(&b), Some(&c));
        // flush is vacuous under plp
        let (after, _) = dev.issue_flush(false);
        assert_eq!(after.cache, dev.cache);
    }

    #[test]
    fn empty_cache_power_loss_is_identity() {
        let (b, c) = data(7);
        let dev = DeviceState::new(DeviceConfig::default());
        let dev = DeviceState {
            media: [(b, c)].into_iter().collect(),
            ..dev
        };
        assert_eq!(dev.power_loss(), dev.media);
    }

    #[test]
    fn enabled_without_present_rejected() {
        let cfg = DeviceConfig {
            volatile_cache_present: false,
            ..DeviceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
