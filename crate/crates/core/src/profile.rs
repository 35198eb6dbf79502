//! Per-filesystem failure semantics.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JournalMode {
    #[serde(rename = "data=journal")]
    Journal,
    #[serde(rename = "data=ordered")]
    Ordered,
    #[serde(rename = "data=writeback")]
    Writeback,
}

impl fmt::Display for JournalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JournalMode::Journal => "data=journal",
            JournalMode::Ordered => "data=ordered",
            JournalMode::Writeback => "data=writeback",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    Ext4Ordered,
    Ext4Writeback,
    Ext4Journal,
    Xfs,
    Btrfs,
    /// Hypothetical control: failed pages are marked dirty again.
    Ext4RestoreDirty,
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::Ext4Ordered => "ext4-ordered",
            ProfileName::Ext4Writeback => "ext4-writeback",
            ProfileName::Ext4Journal => "ext4-journal",
            ProfileName::Xfs => "xfs",
            ProfileName::Btrfs => "btrfs",
            ProfileName::Ext4RestoreDirty => "ext4-restore-dirty",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsProfile {
    pub name: ProfileName,
    pub clears_dirty_on_submit: bool,
    pub restores_dirty_on_failure: bool,
    pub reverts_content_on_failure: bool,
    pub retries_metadata: bool,
    pub error_flag_cleared_after_first_report: bool,
    pub journal_mode: JournalMode,
}

impl FsProfile {
    pub fn named(name: ProfileName) -> FsProfile {
        let base = FsProfile {
            name,
            clears_dirty_on_submit: true,
            restores_dirty_on_failure: false,
            reverts_content_on_failure: false,
            retries_metadata: false,
            error_flag_cleared_after_first_report: true,
            journal_mode: JournalMode::Ordered,
        };
        match name {
            ProfileName::Ext4Ordered => base,
            ProfileName::Ext4Writeback => FsProfile {
                journal_mode: JournalMode::Writeback,
                ..base
            },
            ProfileName::Ext4Journal => FsProfile {
                journal_mode: JournalMode::Journal,
                ..base
            },
            ProfileName::Xfs => FsProfile {
                retries_metadata: true,
                ..base
            },
            ProfileName::Btrfs => FsProfile {
                reverts_content_on_failure: true,
                ..base
            },
            ProfileName::Ext4RestoreDirty => FsProfile {
                restores_dirty_on_failure: true,
                ..base
            },
        }
    }

    pub fn with_mode(mut self, mode: JournalMode) -> FsProfile {
        self.journal_mode = mode;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_table_matches_documented_semantics() {
        for name in [
            ProfileName::Ext4Ordered,
            ProfileName::Ext4Writeback,
            ProfileName::Ext4Journal,
            ProfileName::Xfs,
        ] {
            let p = FsProfile::named(name);
            assert!(p.clears_dirty_on_submit);
            assert!(!p.restores_dirty_on_failure);
        }
        assert!(FsProfile::named(ProfileName::Btrfs).reverts_content_on_failure);
        assert!(FsProfile::named(ProfileName::Xfs).retries_metadata);
        for name in [
            ProfileName::Ext4Ordered,
            ProfileName::Xfs,
            ProfileName::Btrfs,
        ] {
            assert!(FsProfile::named(name).error_flag_cleared_after_first_report);
        }
    }

    #[test]
    fn names_round_trip_through_json() {
        let json = serde_json::to_string(&ProfileName::Ext4Writeback).unwrap();
        assert_eq!(json, "\"ext4-writeback\"");
        let mode: JournalMode = serde_json::from_str("\"data=journal\"").unwrap();
        assert_eq!(mode, JournalMode::Journal);
        assert!(serde_json::from_str::<ProfileName>("\"zfs\"").is_err());
    }
}
