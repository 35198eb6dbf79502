//! Multi-step protocols with optional reverse steps, checked for the
//! all-forward or all-reversed property under interruption.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checker::{CheckName, CheckReport, Counterexample, Verdict, MAX_COUNTEREXAMPLES};
use crate::error::{Error, Result};
use crate::fault::{Decision, FaultPoint, FaultSchedule};

pub type Facts = BTreeSet<String>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effect {
    #[serde(default)]
    pub add: Vec<String>,
    #[serde(default)]
    pub remove: Vec<String>,
}

impl Effect {
    fn apply(&self, facts: &mut Facts) {
        for f in &self.remove {
            facts.remove(f);
        }
        for f in &self.add {
            facts.insert(f.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolStep {
    pub name: String,
    pub forward: Effect,
    #[serde(default)]
    pub reverse: Option<Effect>,
    #[serde(default = "yes")]
    pub fallible: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(default)]
    pub initial: Vec<String>,
    pub steps: Vec<ProtocolStep>,
}

impl Protocol {
    pub fn initial_facts(&self) -> Facts {
        self.initial.iter().cloned().collect()
    }

    pub fn completed_facts(&self) -> Facts {
        let mut facts = self.initial_facts();
        for s in &self.steps {
            s.forward.apply(&mut facts);
        }
        facts
    }

    /// Copy to the second filesystem, then delete from the first, with no
    /// way to undo either.
    pub fn mv_crossfs() -> Protocol {
        Protocol {
            initial: vec!["fs1:file".into()],
            steps: vec![
                ProtocolStep {
                    name: "copy".into(),
                    forward: Effect {
                        add: vec!["fs2:file".into()],
                        remove: vec![],
                    },
                    reverse: None,
                    fallible: true,
                },
                ProtocolStep {
                    name: "delete".into(),
                    forward: Effect {
                        add: vec![],
                        remove: vec!["fs1:file".into()],
                    },
                    reverse: None,
                    fallible: true,
                },
            ],
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ending {
    Completed,
    Reversed,
    /// A forward step failed and some executed step has no reverse.
    Stranded,
    /// A reverse step itself failed.
    ReverseFailed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub plan: Vec<bool>,
    pub log: Vec<String>,
    pub facts: Facts,
    pub ending: Ending,
}

/// Runs the protocol answering each fault opportunity from `plan`; missing
/// entries mean no fault. Returns the execution and the decisions taken.
pub fn execute(protocol: &Protocol, plan: &[bool]) -> (Execution, Vec<Decision>) {
    let mut decisions = Vec::new();
    let mut next = plan.iter().copied();
    let mut decide = |site: String, decisions: &mut Vec<Decision>| {
        let inject = next.next().unwrap_or(false);
        decisions.push(Decision {
            point: FaultPoint::F1,
            site,
            inject,
        });
        inject
    };
    let mut facts = protocol.initial_facts();
    let mut log = Vec::new();
    let mut done: Vec<&ProtocolStep> = Vec::new();
    let mut ending = Ending::Completed;
    for step in &protocol.steps {
        if step.fallible && decide(format!("forward {}", step.name), &mut decisions) {
            log.push(format!("{} failed", step.name));
            ending = Ending::Reversed;
            for prior in done.iter().rev() {
                let Some(rev) = &prior.reverse else {
                    log.push(format!("{} has no reverse", prior.name));
                    ending = Ending::Stranded;
                    break;
                };
                if decide(format!("reverse {}", prior.name), &mut decisions) {
                    log.push(format!("reverse {} failed", prior.name));
                    ending = Ending::ReverseFailed;
                    break;
                }
                rev.apply(&mut facts);
                log.push(format!("reversed {}", prior.name));
            }
            break;
        }
        step.forward.apply(&mut facts);
        log.push(format!("{} done", step.name));
        done.push(step);
    }
    let plan = decisions.iter().map(|d| d.inject).collect();
    (
        Execution {
            plan,
            log,
            facts,
            ending,
        },
        decisions,
    )
}

/// Every execution with at most `max_faults` injected faults, in
/// canonical order.
pub fn executions(protocol: &Protocol, max_faults: usize) -> Vec<(Execution, Vec<Decision>)> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::<bool>::new()];
    while let Some(prefix) = stack.pop() {
        let (exec, decisions) = execute(protocol, &prefix);
        if decisions.len() == prefix.len() {
            out.push((exec, decisions));
            continue;
        }
        let used = prefix.iter().filter(|b| **b).count();
        let mut no = prefix.clone();
        no.push(false);
        stack.push(no);
        if used < max_faults {
            let mut yes = prefix;
            yes.push(true);
            stack.push(yes);
        }
    }
    out.sort_by_key(|(e, _)| (e.plan.iter().filter(|b| **b).count(), e.plan.clone()));
    out
}

pub fn check_completeness(protocol: &Protocol, max_faults: usize) -> Result<CheckReport> {
    let names: BTreeSet<&str> = protocol.steps.iter().map(|s| s.name.as_str()).collect();
    if names.len() != protocol.steps.len() {
        return Err(Error::Config("protocol step names must be unique".into()));
    }
    let runs = executions(protocol, max_faults);
    let (initial, complete) = (protocol.initial_facts(), protocol.completed_facts());
    let mut counterexamples = Vec::new();
    let mut structural = false;
    for (exec, decisions) in &runs {
        let acceptable = exec.facts == initial || exec.facts == complete;
        if acceptable && matches!(exec.ending, Ending::Completed | Ending::Reversed) {
            continue;
        }
        structural |= exec.ending == Ending::Stranded;
        let facts: Vec<&str> = exec.facts.iter().map(String::as_str).collect();
        counterexamples.push(Counterexample {
            schedule: FaultSchedule {
                decisions: decisions.clone(),
                crash_after: None,
            },
            trace: Vec::new(),
            step: None,
            description: format!(
                "{}; stranded with facts {{{}}}",
                exec.log.join(", "),
                facts.join(", ")
            ),
            view: None,
        });
    }
    let verdict = if counterexamples.is_empty() {
        Verdict::Holds
    } else if structural {
        Verdict::StructurallyIncomplete
    } else {
        Verdict::Violated
    };
    let mut report = CheckReport::new(CheckName::Completeness, verdict, runs.len());
    let missing: Vec<&str> = protocol
        .steps
        .iter()
        .filter(|s| s.fallible && s.reverse.is_none())
        .map(|s| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        report
            .notes
            .push(format!("steps without a reverse: {}", missing.join(", ")));
    }
    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    report.counterexamples = counterexamples;
    Ok(report)
}
