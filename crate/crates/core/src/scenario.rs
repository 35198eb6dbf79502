//! Scenario files: a JSON description of what to run and check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checker::{
    check_clean_durable, check_commit_boundary, check_device_queries, check_flush_noop,
    check_no_commit_time, check_plp_equivalence, check_prefix_consistency, check_retry_soundness,
    check_write_sync_rename, durable_at, replay, wsr_harness, CheckName, CheckReport, WsrSteps,
};
use crate::completeness::{check_completeness, Protocol};
use crate::device::DeviceConfig;
use crate::error::{Error, Result};
use crate::fault::{Bounds, FaultSchedule};
use crate::model::{FilePath, WriteItem};
use crate::profile::{FsProfile, JournalMode, ProfileName};
use crate::sim::{RetryPolicy, RseqModel, ServiceModel};
use crate::syscall::Env;
use crate::workload::{Harness, InitialFile, Op};

/// Write-set member as written in a scenario: the version produced by a
/// workload op, or a path binding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum WriteRef {
    Op(usize),
    Binding(FilePath),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrySimSpec {
    pub service: ServiceModel,
    pub policy: RetryPolicy,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_profile")]
    pub profile: ProfileName,
    /// Overrides the profile's journal mode.
    #[serde(default)]
    pub journal_mode: Option<JournalMode>,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub initial_files: Vec<InitialFile>,
    #[serde(default)]
    pub workload: Vec<Op>,
    /// Defaults to every version the workload writes.
    #[serde(default)]
    pub write_set: Option<Vec<WriteRef>>,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub stop_on_error: bool,
    #[serde(default)]
    pub sync_writes: bool,
    #[serde(default)]
    pub seed: u64,
    /// Generates the replacement workload instead of `workload`.
    #[serde(default)]
    pub wsr_steps: Option<WsrSteps>,
    /// Profile the retry-soundness schedules are replayed under as a control.
    #[serde(default)]
    pub control_profile: Option<ProfileName>,
    #[serde(default)]
    pub protocol: Option<Protocol>,
    #[serde(default)]
    pub retry_sim: Option<RetrySimSpec>,
    #[serde(default)]
    pub rseq: Option<RseqModel>,
}

fn default_profile() -> ProfileName {
    ProfileName::Ext4Ordered
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("lemma-ext4", include_str!("../scenarios/lemma-ext4.json")),
    (
        "retry-nonsound",
        include_str!("../scenarios/retry-nonsound.json"),
    ),
    (
        "prefix-violation",
        include_str!("../scenarios/prefix-violation.json"),
    ),
    ("wsr-full", include_str!("../scenarios/wsr-full.json")),
    ("wsr-drop2", include_str!("../scenarios/wsr-drop2.json")),
    ("wsr-drop4", include_str!("../scenarios/wsr-drop4.json")),
    ("flush-noop", include_str!("../scenarios/flush-noop.json")),
    (
        "plp-equivalence",
        include_str!("../scenarios/plp-equivalence.json"),
    ),
    ("mv-crossfs", include_str!("../scenarios/mv-crossfs.json")),
    (
        "herd-collapse",
        include_str!("../scenarios/herd-collapse.json"),
    ),
    ("herd-jitter", include_str!("../scenarios/herd-jitter.json")),
    ("rseq-basic", include_str!("../scenarios/rseq-basic.json")),
];

pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(n, text)| {
        Scenario::parse(text).unwrap_or_else(|e| panic!("bundled scenario {n}: {e}"))
    })
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file, or falls back to a bundled scenario by name.
    pub fn load(arg: &str) -> Result<Scenario> {
        let path = Path::new(arg);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            return Scenario::parse(&text).map_err(|e| match e {
                Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
                other => other,
            });
        }
        bundled(arg).ok_or_else(|| {
            Error::Config(format!(
                "no scenario file or bundled scenario named {arg:?}"
            ))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn validate(&self) -> Result<()> {
        self.device.validate()?;
        if self.wsr_steps.is_some() && !(self.workload.is_empty() && self.initial_files.is_empty())
        {
            return Err(Error::Config(
                "wsr_steps generates its own files and workload; leave initial_files and workload empty".into(),
            ));
        }
        if let Some(sim) = &self.retry_sim {
            sim.service.validate(sim.horizon)?;
            sim.policy.validate()?;
        }
        if let Some(r) = &self.rseq {
            r.validate()?;
        }
        if self.checks.contains(&CheckName::Completeness) && self.protocol.is_none() {
            return Err(Error::Config("completeness check needs a protocol".into()));
        }
        let h = self.harness()?;
        self.writes(&h)?;
        Ok(())
    }

    pub fn env(&self, profile: ProfileName) -> Env {
        let mut p = FsProfile::named(profile);
        if let Some(mode) = self.journal_mode {
            p = p.with_mode(mode);
        }
        Env {
            profile: p,
            sync_writes: self.sync_writes,
        }
    }

    pub fn harness(&self) -> Result<Harness> {
        self.harness_for(self.profile)
    }

    pub fn harness_for(&self, profile: ProfileName) -> Result<Harness> {
        let env = self.env(profile);
        match self.wsr_steps {
            Some(steps) => wsr_harness(steps, env, self.device),
            None => Harness::new(
                env,
                self.device,
                self.initial_files.clone(),
                self.workload.clone(),
                self.stop_on_error,
            ),
        }
    }

    pub fn writes(&self, harness: &Harness) -> Result<Vec<WriteItem>> {
        let Some(refs) = &self.write_set else {
            return Ok(harness.data_writes());
        };
        refs.iter()
            .map(|r| match r {
                WriteRef::Op(i) => harness.version_of(*i).map(WriteItem::Data).ok_or_else(|| {
                    Error::Config(format!("write_set refers to op {i}, which is not a write"))
                }),
                WriteRef::Binding(p) => Ok(WriteItem::Binding(p.clone())),
            })
            .collect()
    }

    pub fn bounds_with(&self, max_faults: Option<usize>) -> Bounds {
        let mut b = self.bounds.clone();
        if let Some(k) = max_faults {
            b.max_faults = k;
        }
        b
    }

    pub fn run_check(&self, check: CheckName, bounds: &Bounds) -> Result<CheckReport> {
        let h = self.harness()?;
        let writes = self.writes(&h)?;
        match check {
            CheckName::CommitBoundary => check_commit_boundary(&h, &writes, bounds),
            CheckName::RetrySoundness => {
                let mut report = check_retry_soundness(&h, &writes, bounds)?;
                if let Some(control) = self.control_profile {
                    for cx in &report.counterexamples.clone() {
                        let ok = self.control_durable(control, &cx.schedule, &writes)?;
                        report.notes.push(format!(
                            "control {control}: schedule [{}] ends durable={ok}",
                            cx.schedule
                        ));
                    }
                }
                Ok(report)
            }
            CheckName::CleanDurable => check_clean_durable(&h, &writes, bounds),
            CheckName::PrefixConsistency => check_prefix_consistency(&h, bounds),
            CheckName::WriteSyncRename => check_write_sync_rename(&h, bounds),
            CheckName::Completeness => {
                let p = self
                    .protocol
                    .as_ref()
                    .ok_or_else(|| Error::Config("completeness check needs a protocol".into()))?;
                check_completeness(p, bounds.max_faults)
            }
            CheckName::NoCommitTime => check_no_commit_time(&h, &writes, bounds),
            CheckName::FlushNoop => check_flush_noop(&h),
            CheckName::PlpEquivalence => check_plp_equivalence(&h, bounds),
            CheckName::DeviceQueries => check_device_queries(&h, &writes, bounds),
        }
    }

    /// Replays `schedule`'s fault plan under another profile and reports
    /// whether the write-set ends durable.
    pub fn control_durable(
        &self,
        profile: ProfileName,
        schedule: &FaultSchedule,
        writes: &[WriteItem],
    ) -> Result<bool> {
        let h = self.harness_for(profile)?;
        let outcome = replay(&h, schedule);
        durable_at(outcome.final_state(), writes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses_and_round_trips() {
        for (name, _) in BUNDLED {
            let s = bundled(name).unwrap();
            assert_eq!(&s.name, name);
            assert_eq!(Scenario::parse(&s.to_json()).unwrap(), s);
        }
    }

    #[test]
    fn unknown_profile_is_rejected_with_position() {
        let text = "{\n  \"name\": \"x\",\n  \"profile\": \"zfs\"\n}";
        let err = Scenario::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_check_is_rejected() {
        assert!(Scenario::parse(r#"{"name": "x", "checks": ["fsck"]}"#).is_err());
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(Scenario::parse(r#"{"name": "x", "wrkload": []}"#).is_err());
    }

    #[test]
    fn write_set_must_name_writes() {
        let text = r#"{"name": "x", "initial_files": [{"path": "d/f"}],
            "workload": [{"op": "fsync", "path": "d/f"}], "write_set": [{"op": 0}]}"#;
        assert!(matches!(Scenario::parse(text), Err(Error::Config(_))));
    }
}
