// SPDX-License-Identifier: Apache-2.0

//! Diff a run's metrics against its failure-free reference.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::sim::metrics::IterationMetrics;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("metrics come from different configs (run {run}, reference {reference})")]
    ConfigMismatch { run: String, reference: String },
    #[error("{0} metrics file is empty")]
    Empty(&'static str),
    #[error("{which} metrics mix config hashes ({first} and {other})")]
    MixedHashes {
        which: &'static str,
        first: String,
        other: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDelta {
    pub iteration: u64,
    pub run_loss: f64,
    pub reference_loss: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub deltas: Vec<IterationDelta>,
    pub max_abs_delta: f64,
    pub invariant_violations: usize,
    pub violations: Vec<String>,
    /// Iterations present in only one of the two files.
    pub unmatched_iterations: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn single_hash<'a>(
    which: &'static str,
    m: &'a [IterationMetrics],
) -> Result<&'a str, CompareError> {
    let first = &m.first().ok_or(CompareError::Empty(which))?.config_hash;
    if let Some(other) = m.iter().find(|x| &x.config_hash != first) {
        return Err(CompareError::MixedHashes {
            which,
            first: first.clone(),
            other: other.config_hash.clone(),
        });
    }
    Ok(first)
}

/// Problems with a single iteration's bookkeeping, if any.
pub fn iteration_violations(m: &IterationMetrics) -> Vec<String> {
    let mut out = Vec::new();
    if m.admitted != m.global_batch {
        out.push(format!(
            "iteration {}: committed {} microbatches, global batch is {}",
            m.iteration, m.admitted, m.global_batch
        ));
    }
    if m.distinct_indices != m.admitted {
        out.push(format!(
            "iteration {}: {} admitted but {} distinct stream indices",
            m.iteration, m.admitted, m.distinct_indices
        ));
    }
    if m.bucket_epochs.iter().any(|e| *e != Some(m.epoch)) {
        out.push(format!(
            "iteration {}: buckets not all reduced under the commit epoch {}",
            m.iteration, m.epoch
        ));
    }
    out
}

/// Compare loss series iteration by iteration and count invariant violations
/// in the run. `tolerance` bounds the absolute loss difference.
pub fn compare(
    run: &[IterationMetrics],
    reference: &[IterationMetrics],
    tolerance: f64,
) -> Result<CompareReport, CompareError> {
    let run_hash = single_hash("run", run)?;
    let ref_hash = single_hash("reference", reference)?;
    if run_hash != ref_hash {
        return Err(CompareError::ConfigMismatch {
            run: run_hash.to_string(),
            reference: ref_hash.to_string(),
        });
    }

    let mut deltas = Vec::new();
    for r in run {
        if let Some(f) = reference.iter().find(|f| f.iteration == r.iteration) {
            deltas.push(IterationDelta {
                iteration: r.iteration,
                run_loss: r.loss,
                reference_loss: f.loss,
                delta: r.loss - f.loss,
            });
        }
    }
    let unmatched = run.len() + reference.len() - 2 * deltas.len();
    let max_abs_delta = deltas.iter().map(|d| d.delta.abs()).fold(0.0, f64::max);
    let violations: Vec<String> = run.iter().flat_map(iteration_violations).collect();
    let passed = violations.is_empty() && unmatched == 0 && max_abs_delta <= tolerance;
    Ok(CompareReport {
        deltas,
        max_abs_delta,
        invariant_violations: violations.len(),
        violations,
        unmatched_iterations: unmatched,
        tolerance,
        passed,
    })
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iteration  run_loss  reference_loss  delta")?;
        for d in &self.deltas {
            writeln!(
                f,
                "{:>9}  {:.10e}  {:.10e}  {:+.3e}",
                d.iteration, d.run_loss, d.reference_loss, d.delta
            )?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        writeln!(f, "iterations compared: {}", self.deltas.len())?;
        if self.unmatched_iterations > 0 {
            writeln!(f, "unmatched iterations: {}", self.unmatched_iterations)?;
        }
        writeln!(
            f,
            "max |delta loss|: {:e} (tolerance {:e})",
            self.max_abs_delta, self.tolerance
        )?;
        writeln!(f, "invariant violations: {}", self.invariant_violations)?;
        write!(f, "result: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}
