// SPDX-License-Identifier: Apache-2.0

//! Per-iteration metrics and their line-delimited JSON form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::policy::PolicyKind;
use crate::trainer::{FailureEvent, WorkTally};
use crate::types::{ReplicaId, RoleCounts, WorldEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaContribution {
    pub replica: ReplicaId,
    pub microbatches: usize,
}

/// One committed iteration. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub config_hash: String,
    pub policy: PolicyKind,
    pub iteration: u64,
    pub loss: f64,
    pub global_batch: usize,
    /// Replicas alive at commit.
    pub w_cur: usize,
    /// Steady accumulation the iteration started with.
    pub g_cur: usize,
    pub epoch: WorldEpoch,
    pub reduce_epoch: WorldEpoch,
    /// Roles the iteration started with.
    pub layout: RoleCounts,
    pub contributions: Vec<ReplicaContribution>,
    pub admitted: usize,
    pub distinct_indices: usize,
    pub boundary: bool,
    pub bucket_epochs: Vec<Option<WorldEpoch>>,
    pub work: WorkTally,
    pub iteration_seconds: f64,
    pub clock_seconds: f64,
    pub tokens: u64,
    pub throughput: f64,
    pub params: Vec<f64>,
    pub events: Vec<FailureEvent>,
}

pub fn to_jsonl(metrics: &[IterationMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, metrics: &[IterationMetrics]) -> Result<(), SimError> {
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(metrics).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| SimError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<IterationMetrics>, SimError> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SimError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line)
            .map_err(|e| SimError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(m);
    }
    Ok(out)
}
