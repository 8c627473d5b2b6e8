//! `dbrb`: run scenarios, check traces and sweep seeds.
//!
//! Exit codes: 0 clean, 1 property failure, 2 usage or input error, 3 truncated
//! run or inconclusive verdicts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dbrb_sim::net::callback_name;
use dbrb_sim::scenario::CallbackKind;
use dbrb_sim::{check, run_with_limits, EventKind, Property, Report, Scenario, Trace};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "dbrb", version, about = "Dynamic Byzantine reliable broadcast simulator")]
struct Cli {
    /// Directory used to resolve scenario names that are not existing paths.
    #[arg(long, global = true, env = "DBRB_SCENARIO_DIR")]
    scenario_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one seed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the JSON Lines trace.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's delivery limit.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Check a trace against its scenario.
    Check {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run and check a range of seeds, `A..B` (exclusive) or `A..=B`.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedRange,
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, Debug)]
struct SeedRange {
    start: u64,
    end: u64,
}

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(format!("expected A..B or A..=B, got {s:?}"));
    };
    let start: u64 = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
    let mut end: u64 = b.trim().parse().map_err(|e| format!("bad end {b:?}: {e}"))?;
    if inclusive {
        end = end.checked_add(1).ok_or("range end too large")?;
    }
    if end <= start {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok(SeedRange { start, end })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: &Cli) -> Result<u8> {
    let dir = cli.scenario_dir.as_deref();
    match &cli.command {
        Command::Run { scenario, seed, out, max_steps } => {
            let s = load(scenario, dir)?;
            let mut limits = s.limits.clone();
            if let Some(k) = max_steps {
                limits.max_steps = *k;
            }
            let trace = run_with_limits(&s, *seed, limits);
            if let Some(path) = out {
                std::fs::write(path, trace.to_jsonl())
                    .with_context(|| format!("writing trace to {}", path.display()))?;
            }
            print!("{}", summary(&trace));
            Ok(if trace.truncated() { 3 } else { 0 })
        }
        Command::Check { trace, scenario } => {
            let s = load(scenario, dir)?;
            let text = std::fs::read_to_string(trace).with_context(|| format!("reading trace {}", trace.display()))?;
            let t = Trace::from_jsonl(&text)?;
            let report = check(&t, &s)?;
            print!("{}", report.table());
            Ok(report.exit_code() as u8)
        }
        Command::Sweep { scenario, seeds, parallel } => {
            let s = load(scenario, dir)?;
            let one = |seed: u64| -> Result<Report> { Ok(check(&dbrb_sim::run(&s, seed), &s)?) };
            let reports: Vec<Report> = if *parallel {
                (seeds.start..seeds.end).into_par_iter().map(one).collect::<Result<_>>()?
            } else {
                (seeds.start..seeds.end).map(one).collect::<Result<_>>()?
            };
            print!("{}", sweep_table(&s, *seeds, &reports));
            Ok(if reports.iter().any(Report::any_fail) { 1 } else { 0 })
        }
    }
}

fn load(path: &Path, dir: Option<&Path>) -> Result<Scenario> {
    let resolved = if path.exists() {
        path.to_path_buf()
    } else if let Some(dir) = dir {
        let mut p = dir.join(path);
        if !p.exists() && p.extension().is_none() {
            p.set_extension("json");
        }
        p
    } else {
        path.to_path_buf()
    };
    if !resolved.exists() {
        bail!("scenario {} not found", path.display());
    }
    Ok(Scenario::load(&resolved)?)
}

fn summary(trace: &Trace) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last_install = BTreeMap::new();
    for e in &trace.events {
        if e.is(EventKind::Callback) {
            *counts.entry(e.detail.as_deref().unwrap_or("?")).or_default() += 1;
        }
        if e.is(EventKind::Install) {
            *counts.entry("installs").or_default() += 1;
            last_install.insert(e.actor, e.view.clone());
        }
        if e.is(EventKind::Flag) {
            *counts.entry("flags").or_default() += 1;
        }
    }
    let get = |k: &str| counts.get(k).copied().unwrap_or(0);
    let final_view = last_install.values().flatten().max().map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let mut line = |label: &str, value: String| out.push_str(&format!("{:<16}{value}\n", format!("{label}:")));
    line("scenario", format!("{} (seed {})", trace.header.scenario, trace.header.seed));
    line("status", (if trace.truncated() { "truncated" } else { "quiescent" }).into());
    line("events", trace.footer.events.to_string());
    line("messages", trace.footer.messages.to_string());
    line("deliveries", trace.footer.deliveries.to_string());
    line("installs", get("installs").to_string());
    for kind in [CallbackKind::Delivered, CallbackKind::JoinComplete, CallbackKind::LeaveComplete] {
        let name = callback_name(kind);
        line(name, get(name).to_string());
    }
    line("flags", get("flags").to_string());
    line("final view", final_view);
    out
}

fn sweep_table(s: &Scenario, seeds: SeedRange, reports: &[Report]) -> String {
    let mut out = format!("scenario {} seeds {}..{} ({} runs)\n", s.name, seeds.start, seeds.end, reports.len());
    out.push_str(&format!("{:<22} {:>6} {:>6} {:>13}\n", "property", "pass", "fail", "inconclusive"));
    for p in Property::ALL {
        let (mut pass, mut fail, mut inc) = (0, 0, 0);
        for r in reports {
            match r.status(p) {
                dbrb_sim::Status::Pass => pass += 1,
                dbrb_sim::Status::Fail { .. } => fail += 1,
                dbrb_sim::Status::Inconclusive(_) => inc += 1,
            }
        }
        out.push_str(&format!("{:<22} {pass:>6} {fail:>6} {inc:>13}\n", p.to_string()));
    }
    let outside = reports.iter().filter(|r| !r.regime.within_bound).count();
    match reports.first() {
        Some(r) if outside == 0 => out.push_str(&format!("regime: {}\n", r.regime)),
        Some(_) => {
            let worst = reports.iter().find(|r| !r.regime.within_bound).expect("counted above");
            out.push_str(&format!("regime: {} ({outside} of {} runs)\n", worst.regime, reports.len()));
        }
        None => {}
    }
    out
}
