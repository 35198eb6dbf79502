//! Command-line driver.
//!
//! Exit codes: 0 when every requested check holds, 1 when a violation or
//! witness was found, 2 for configuration and other errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::checker::{explore_report, CheckName, CheckReport};
use crate::error::{Error, Result};
use crate::report::{canonical_json, witness_jsonl, FullReport};
use crate::scenario::Scenario;
use crate::sim::{simulate_retry_storm, simulate_rseq};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "persistcheck",
    version,
    about = "Crash-consistency model checker and retry simulator"
)]
pub struct Cli {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Directory for report and witness files; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum injected faults, overriding the scenario.
    #[arg(long, global = true)]
    pub bounds: Option<usize>,
    /// Simulation seed, overriding the scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate every schedule and summarize the outcomes.
    Explore,
    /// Run one named check.
    Check {
        name: String,
    },
    /// Run one named check and write its witness trace.
    Witness {
        name: String,
    },
    SimulateRetry,
    SimulateRseq,
    /// Run every check the scenario lists, plus any simulations.
    Report,
    /// List bundled scenarios.
    Scenarios,
}

struct Ctx<'a> {
    cli: &'a Cli,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn emit(&mut self, file: &str, text: &str) -> Result<()> {
        match &self.cli.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(file), text)?;
            }
            None => self.stdout.write_all(text.as_bytes())?,
        }
        Ok(())
    }
}

fn scenario(cli: &Cli) -> Result<Scenario> {
    let name = cli
        .scenario
        .as_deref()
        .ok_or_else(|| Error::Config("--scenario is required".into()))?;
    Scenario::load(name)
}

fn run_check(s: &Scenario, cli: &Cli, name: CheckName) -> Result<CheckReport> {
    s.run_check(name, &s.bounds_with(cli.bounds))
}

fn code(holds: bool) -> i32 {
    if holds {
        0
    } else {
        1
    }
}

fn execute(ctx: &mut Ctx<'_>) -> Result<i32> {
    let cli = ctx.cli;
    match &cli.command {
        Command::Scenarios => {
            let mut text = String::new();
            for (name, _) in crate::scenario::BUNDLED {
                text.push_str(name);
                text.push('\n');
            }
            ctx.stdout.write_all(text.as_bytes())?;
            Ok(0)
        }
        Command::Explore => {
            let s = scenario(cli)?;
            let h = s.harness()?;
            let r = explore_report(&h, &s.writes(&h)?, &s.bounds_with(cli.bounds))?;
            ctx.emit("explore.json", &canonical_json(&r)?)?;
            Ok(0)
        }
        Command::Check { name } => {
            let check: CheckName = name.parse()?;
            let s = scenario(cli)?;
            let r = run_check(&s, cli, check)?;
            ctx.emit(&format!("check-{check}.json"), &canonical_json(&r)?)?;
            if cli.out.is_some() && !r.verdict.holds() {
                if let Ok(text) = witness_jsonl(&s.harness()?, &r) {
                    ctx.emit(&format!("witness-{check}.jsonl"), &text)?;
                }
            }
            Ok(code(r.verdict.holds()))
        }
        Command::Witness { name } => {
            let check: CheckName = name.parse()?;
            let s = scenario(cli)?;
            let r = run_check(&s, cli, check)?;
            let text = witness_jsonl(&s.harness()?, &r)?;
            ctx.emit(&format!("witness-{check}.jsonl"), &text)?;
            Ok(1)
        }
        Command::SimulateRetry => {
            let s = scenario(cli)?;
            let sim = s.retry_sim.as_ref().ok_or_else(|| {
                Error::Config(format!("scenario {} has no retry_sim section", s.name))
            })?;
            let r = simulate_retry_storm(
                &sim.service,
                &sim.policy,
                cli.seed.unwrap_or(s.seed),
                sim.horizon,
            )?;
            ctx.emit("retry.json", &canonical_json(&r)?)?;
            Ok(0)
        }
        Command::SimulateRseq => {
            let s = scenario(cli)?;
            let m = s
                .rseq
                .as_ref()
                .ok_or_else(|| Error::Config(format!("scenario {} has no rseq section", s.name)))?;
            let r = simulate_rseq(m, cli.seed.unwrap_or(s.seed))?;
            ctx.emit("rseq.json", &canonical_json(&r)?)?;
            Ok(0)
        }
        Command::Report => {
            let s = scenario(cli)?;
            let r = full_report(&s, cli.bounds, cli.seed)?;
            ctx.emit("report.json", &canonical_json(&r)?)?;
            Ok(code(r.all_hold()))
        }
    }
}

pub fn full_report(
    s: &Scenario,
    max_faults: Option<usize>,
    seed: Option<u64>,
) -> Result<FullReport> {
    let bounds = s.bounds_with(max_faults);
    let mut checks = BTreeMap::new();
    for c in &s.checks {
        checks.insert(*c, s.run_check(*c, &bounds)?);
    }
    let seed = seed.unwrap_or(s.seed);
    let retry = match &s.retry_sim {
        Some(sim) => Some(simulate_retry_storm(
            &sim.service,
            &sim.policy,
            seed,
            sim.horizon,
        )?),
        None => None,
    };
    let rseq = match &s.rseq {
        Some(m) => Some(simulate_rseq(m, seed)?),
        None => None,
    };
    Ok(FullReport {
        scenario: s.name.clone(),
        checks,
        retry,
        rseq,
    })
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut ctx = Ctx { cli: &cli, stdout };
    match execute(&mut ctx) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}
