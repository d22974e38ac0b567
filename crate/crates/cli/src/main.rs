// SPDX-License-Identifier: Apache-2.0

//! `recover`: generate failure schedules, run simulations, compare runs.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 invariant violation or
//! failed comparison, 3 every replica died.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use recover::compare::compare;
use recover::config::ExperimentConfig;
use recover::par::Execution;
use recover::policy::PolicyKind;
use recover::sim::metrics::{read_jsonl, to_jsonl, write_jsonl, IterationMetrics};
use recover::sim::schedule::{generate_schedule, FailureSchedule, GenerationSpec, LocationWeights};
use recover::sim::{run_experiment, RunReport, SimError};
use recover::walkthrough;

#[derive(Parser)]
#[command(
    name = "recover",
    version,
    about = "Forward-recovery training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random failure schedule.
    Generate(GenerateArgs),
    /// Run a simulation under a failure schedule.
    Run(RunArgs),
    /// Run the failure-free reference of a config.
    Reference(ReferenceArgs),
    /// Compare a run's metrics against its reference.
    Compare(CompareArgs),
    /// Replay the 32-replica worked example and check every number.
    Walkthrough,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Iteration range `start:end`, end exclusive.
    #[arg(long, value_parser = parse_steps)]
    steps: (u64, u64),
    #[arg(long)]
    replicas: usize,
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    #[arg(long, default_value_t = 1)]
    buckets: usize,
    /// Location weights, e.g. `before_sync=1,during_sync=2,after_sync=1`.
    #[arg(long)]
    weights: Option<LocationWeights>,
    /// Write YAML here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    execution: Option<Execution>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics JSONL destination. Falls back to the config's `output`, then stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// YAML failure schedule.
    #[arg(long)]
    schedule: Option<PathBuf>,
}

#[derive(Args)]
struct ReferenceArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CompareArgs {
    run: PathBuf,
    reference: PathBuf,
    /// Largest allowed absolute per-iteration loss difference.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
}

fn parse_steps(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected start:end, got `{s}`"))?;
    let a = a.trim().parse().map_err(|_| format!("bad start `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad end `{b}`"))?;
    Ok((a, b))
}

enum Failure {
    Input(anyhow::Error),
    Invariant(String),
    AllDead(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .context("writing stdout"),
    }
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let spec = GenerationSpec {
        seed: args.seed,
        count: args.count,
        step_start: args.steps.0,
        step_end: args.steps.1,
        replicas: args.replicas,
        ranks_per_replica: args.ranks,
        buckets: args.buckets,
        weights: args.weights.unwrap_or_default(),
    };
    let schedule = generate_schedule(&spec).map_err(anyhow::Error::from)?;
    write_text(args.output.as_deref(), &schedule.to_yaml_string())?;
    Ok(())
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = o.policy {
        cfg.policy = p;
    }
    if let Some(e) = o.execution {
        cfg.execution = e;
    }
    if let Some(n) = o.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.output {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_metrics(cfg: &ExperimentConfig, metrics: &[IterationMetrics]) -> Result<()> {
    match &cfg.output {
        Some(p) => Ok(write_jsonl(p, metrics)?),
        None => write_text(None, &to_jsonl(metrics)),
    }
}

fn summarize(report: &RunReport) {
    let failures: usize = report
        .metrics
        .iter()
        .flat_map(|m| &m.events)
        .map(|e| e.record.failed_replicas.len())
        .sum();
    let boundaries = report.metrics.iter().filter(|m| m.boundary).count();
    let last = report.metrics.last();
    eprintln!(
        "config {}: {} iterations, {failures} failures, {boundaries} boundaries, {} replicas left",
        &report.config_hash[..12],
        report.metrics.len(),
        last.map_or(0, |m| m.w_cur),
    );
    if let Some(m) = last {
        eprintln!(
            "final loss {:.6e}, held-out loss {:.6e}, simulated time {:.3}s",
            m.loss, report.eval_loss, m.clock_seconds
        );
    }
}

fn simulate(cfg: &ExperimentConfig, schedule: &FailureSchedule) -> Result<(), Failure> {
    match run_experiment(cfg, schedule) {
        Ok(report) => {
            emit_metrics(cfg, &report.metrics)?;
            summarize(&report);
            Ok(())
        }
        Err(e) => {
            if let Some(partial) = e.partial_report() {
                emit_metrics(cfg, &partial.metrics)?;
            }
            match e {
                SimError::InvariantViolation { .. } => Err(Failure::Invariant(e.to_string())),
                SimError::AllReplicasDead { .. } => Err(Failure::AllDead(e.to_string())),
                other => Err(Failure::Input(other.into())),
            }
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.overrides)?;
    let schedule = match &args.schedule {
        Some(p) => FailureSchedule::load(p).map_err(anyhow::Error::from)?,
        None => FailureSchedule::empty(),
    };
    simulate(&cfg, &schedule)
}

fn reference(args: ReferenceArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.overrides)?;
    simulate(&cfg, &FailureSchedule::empty())
}

fn compare_cmd(args: CompareArgs) -> Result<(), Failure> {
    let run = read_jsonl(&args.run).map_err(anyhow::Error::from)?;
    let reference = read_jsonl(&args.reference).map_err(anyhow::Error::from)?;
    let report = compare(&run, &reference, args.tolerance).map_err(|e| anyhow!(e))?;
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Invariant("comparison failed".into()))
    }
}

fn walkthrough_cmd() -> Result<(), Failure> {
    let w = walkthrough::run().map_err(|e| match e {
        SimError::AllReplicasDead { .. } => Failure::AllDead(e.to_string()),
        other => Failure::Invariant(other.to_string()),
    })?;
    for line in &w.trace {
        println!("{line}");
    }
    println!();
    for c in &w.checks {
        let mark = if c.passed() { "ok  " } else { "FAIL" };
        println!(
            "{mark} {}: expected {}, got {}",
            c.label, c.expected, c.actual
        );
    }
    if w.passed() {
        println!("all {} checks passed", w.checks.len());
        Ok(())
    } else {
        Err(Failure::Invariant("walkthrough checks failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Reference(a) => reference(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Walkthrough => walkthrough_cmd(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::AllDead(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
