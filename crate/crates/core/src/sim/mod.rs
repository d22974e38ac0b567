// SPDX-License-Identifier: Apache-2.0

//! Deterministic experiment harness: builds the cluster, replays a failure
//! schedule, charges simulated time and collects per-iteration metrics.

pub mod cost;
pub mod metrics;
pub mod schedule;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::par::Execution;
use crate::policy::PolicyKind;
use crate::trainer::{IterationOutcome, Trainer, TrainerError};

use cost::effective_throughput;
use metrics::{IterationMetrics, ReplicaContribution};
use schedule::{FailureSchedule, ScheduleHook};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid schedule: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated in iteration {iteration}: {message}")]
    InvariantViolation {
        iteration: u64,
        message: String,
        report: Box<RunReport>,
    },
    #[error("all replicas died in iteration {iteration}")]
    AllReplicasDead {
        iteration: u64,
        report: Box<RunReport>,
    },
}

impl SimError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Metrics gathered before the run was cut short, if any.
    pub fn partial_report(&self) -> Option<&RunReport> {
        match self {
            SimError::InvariantViolation { report, .. }
            | SimError::AllReplicasDead { report, .. } => Some(report),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub metrics: Vec<IterationMetrics>,
    /// Parameters after each committed iteration.
    pub trajectory: Vec<Vec<f64>>,
    /// Stream indices admitted into each committed iteration.
    pub admitted_indices: Vec<Vec<u64>>,
    pub final_params: Vec<f64>,
    /// Mean loss of the final parameters on the held-out set.
    pub eval_loss: f64,
}

/// Invariants every committed iteration must satisfy.
pub fn check_iteration(
    policy: PolicyKind,
    global_batch: usize,
    out: &IterationOutcome,
) -> Result<(), String> {
    let distinct: BTreeSet<u64> = out.admitted_indices.iter().copied().collect();
    if distinct.len() != out.admitted {
        return Err(format!(
            "{} microbatches admitted but only {} distinct stream indices",
            out.admitted,
            distinct.len()
        ));
    }
    if policy == PolicyKind::Static && out.admitted != global_batch {
        return Err(format!(
            "committed {} microbatches, expected the global batch {global_batch}",
            out.admitted
        ));
    }
    if out.bucket_epochs.iter().any(|e| *e != Some(out.epoch)) {
        return Err(format!(
            "buckets reduced under {:?}, commit epoch is {}",
            out.bucket_epochs, out.epoch
        ));
    }
    Ok(())
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    schedule: &FailureSchedule,
) -> Result<RunReport, SimError> {
    cfg.validate()?;
    schedule.validate(cfg.replicas, cfg.ranks_per_replica, cfg.buckets)?;

    let config_hash = cfg.config_hash();
    let b = cfg.global_batch();
    let mut trainer = Trainer::new(cfg.trainer_config(), cfg.data_stream());
    let mut hook = ScheduleHook::new(schedule);
    let mut report = RunReport {
        config_hash: config_hash.clone(),
        metrics: Vec::new(),
        trajectory: Vec::new(),
        admitted_indices: Vec::new(),
        final_params: trainer.params().to_vec(),
        eval_loss: 0.0,
    };
    let mut clock = 0.0;

    for it in 0..cfg.iterations {
        let out = match trainer.run_iteration(&mut hook) {
            Ok(out) => out,
            Err(TrainerError::AllReplicasDead) => {
                return Err(SimError::AllReplicasDead {
                    iteration: it,
                    report: Box::new(report),
                })
            }
            Err(e) => {
                return Err(SimError::InvariantViolation {
                    iteration: it,
                    message: e.to_string(),
                    report: Box::new(report),
                })
            }
        };
        let seconds = cfg.cost.iteration_seconds(&out.tally);
        clock += seconds;
        let tokens = out.admitted as u64 * cfg.tokens_per_microbatch;
        let check = check_iteration(cfg.policy, b, &out);

        report.metrics.push(IterationMetrics {
            config_hash: config_hash.clone(),
            policy: cfg.policy,
            iteration: out.iteration,
            loss: out.loss,
            global_batch: b,
            w_cur: out.w_cur,
            g_cur: out.g_cur,
            epoch: out.epoch,
            reduce_epoch: out.reduce_epoch,
            layout: out.layout,
            contributions: out
                .contributions
                .iter()
                .map(|(&replica, &microbatches)| ReplicaContribution {
                    replica,
                    microbatches,
                })
                .collect(),
            admitted: out.admitted,
            distinct_indices: out.admitted_indices.iter().collect::<BTreeSet<_>>().len(),
            boundary: out.boundary,
            bucket_epochs: out.bucket_epochs.clone(),
            work: out.tally,
            iteration_seconds: seconds,
            clock_seconds: clock,
            tokens,
            throughput: effective_throughput(tokens, seconds, out.w_cur, cfg.ranks_per_replica),
            params: out.params.clone(),
            events: out.events.clone(),
        });
        report.trajectory.push(out.params.clone());
        report.admitted_indices.push(out.admitted_indices);
        report.final_params = out.params;

        if let Err(message) = check {
            return Err(SimError::InvariantViolation {
                iteration: it,
                message,
                report: Box::new(report),
            });
        }
    }

    let eval = trainer.stream().eval_set(cfg.eval_examples);
    let model = trainer.model();
    report.eval_loss = if eval.is_empty() {
        0.0
    } else {
        eval.iter().map(|e| model.loss(e)).sum::<f64>() / eval.len() as f64
    };
    Ok(report)
}

/// The failure-free run of the same config.
pub fn run_reference(cfg: &ExperimentConfig) -> Result<RunReport, SimError> {
    run_experiment(cfg, &FailureSchedule::empty())
}

/// Run independent experiments, in parallel when `execution` allows.
/// Results come back in input order.
pub fn run_batch(
    jobs: &[(ExperimentConfig, FailureSchedule)],
    execution: Execution,
) -> Vec<Result<RunReport, SimError>> {
    execution.map(jobs, |(cfg, schedule)| run_experiment(cfg, schedule))
}
