// SPDX-License-Identifier: Apache-2.0

//! Simulated-time accounting.

use serde::{Deserialize, Serialize};

use crate::trainer::WorkTally;

/// Seconds charged per unit of work. Replicas run in lockstep, so a
/// microbatch step costs `microbatch` once no matter how many replicas run it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub microbatch: f64,
    /// Paid once per synchronization round.
    pub reduce_fixed: f64,
    /// Paid per successful bucket reduction, re-reductions included.
    pub reduce_per_bucket: f64,
    /// Paid per stale bucket rewound.
    pub restore: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            microbatch: 1.0,
            reduce_fixed: 2.0,
            reduce_per_bucket: 0.25,
            restore: 0.1,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("cost.microbatch", self.microbatch),
            ("cost.reduce_fixed", self.reduce_fixed),
            ("cost.reduce_per_bucket", self.reduce_per_bucket),
            ("cost.restore", self.restore),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if self.microbatch <= 0.0 {
            return Err("cost.microbatch must be positive".into());
        }
        Ok(())
    }

    pub fn iteration_seconds(&self, tally: &WorkTally) -> f64 {
        tally.microbatch_steps as f64 * self.microbatch
            + tally.sync_rounds as f64 * self.reduce_fixed
            + tally.bucket_reductions as f64 * self.reduce_per_bucket
            + tally.restored_buckets as f64 * self.restore
    }
}

/// Processed tokens per second per alive processing element.
pub fn effective_throughput(
    tokens: u64,
    seconds: f64,
    alive_replicas: usize,
    ranks_per_replica: usize,
) -> f64 {
    tokens as f64 / (seconds * alive_replicas as f64 * ranks_per_replica as f64)
}
