// SPDX-License-Identifier: Apache-2.0

//! The 32-replica worked example, run end to end and checked number by number.
//!
//! 32 replicas at 8 microbatches each (B = 256). In iteration 1 replica 31
//! dies while the second bucket is being reduced. No spare exists, so the
//! 31 survivors report 248 microbatches and extend the iteration by one
//! microbatch: 8 survivors contribute it, 23 become boundary-minors. The next
//! iteration runs 28 majors at 9, one minor at 4, one major-spare and one
//! minor-spare. In iteration 3 the minor dies and the minor-spare takes over
//! without touching any quota.

use std::fmt::Display;

use crate::config::ExperimentConfig;
use crate::sim::cost::CostModel;
use crate::sim::schedule::{FailureSchedule, InjectionPoint, ScheduleEntry};
use crate::sim::{run_experiment, RunReport, SimError};
use crate::types::{ReplicaId, ReplicaRole};

pub const BOUNDARY_STEP: u64 = 1;
pub const PROMOTION_STEP: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub label: String,
    pub expected: String,
    pub actual: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug, Clone)]
pub struct Walkthrough {
    pub report: RunReport,
    pub trace: Vec<String>,
    pub checks: Vec<Check>,
}

impl Walkthrough {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

pub fn config() -> ExperimentConfig {
    ExperimentConfig {
        replicas: 32,
        grad_accum: 8,
        ranks_per_replica: 8,
        iterations: 5,
        buckets: 3,
        dim: 4,
        eval_examples: 64,
        cost: CostModel::default(),
        ..Default::default()
    }
}

pub fn schedule() -> FailureSchedule {
    FailureSchedule::from_entries(vec![
        ScheduleEntry {
            step: BOUNDARY_STEP,
            replica: ReplicaId(31),
            local_rank: 0,
            location: InjectionPoint::DuringSync(1),
        },
        ScheduleEntry {
            step: PROMOTION_STEP,
            replica: ReplicaId(28),
            local_rank: 0,
            location: InjectionPoint::DuringSync(2),
        },
    ])
}

struct Checker {
    checks: Vec<Check>,
}

impl Checker {
    fn eq(&mut self, label: &str, expected: impl Display, actual: impl Display) {
        self.checks.push(Check {
            label: label.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
}

pub fn run() -> Result<Walkthrough, SimError> {
    let report = run_experiment(&config(), &schedule())?;
    let m = &report.metrics;
    let mut c = Checker { checks: Vec::new() };
    let mut trace = Vec::new();

    let before = &m[0];
    trace.push(format!(
        "iteration 0: {} replicas, G = {}, {} microbatches committed, epoch {}",
        before.w_cur, before.g_cur, before.admitted, before.epoch
    ));
    c.eq(
        "initial layout",
        "32 major / 0 minor / 0 major-spare / 0 minor-spare",
        before.layout,
    );

    let t = &m[BOUNDARY_STEP as usize];
    let ev = t.events.first();
    let contrib = ev.map(|e| e.record.contrib()).unwrap_or_default();
    let g_ext = ev.and_then(|e| e.decision.g_ext).unwrap_or_default();
    let n_bdry = ev.and_then(|e| e.decision.n_bdry).unwrap_or_default();
    trace.push(format!(
        "iteration {BOUNDARY_STEP}: replica 31 dies before bucket 1; survivors report contrib = {contrib}, boundary = {}, epoch -> {}",
        ev.is_some_and(|e| e.record.at_boundary),
        ev.map(|e| e.record.epoch_after.to_string()).unwrap_or_default()
    ));
    c.eq("failure events at boundary step", 1, t.events.len());
    c.eq("contribution at failure", 248, contrib);
    c.eq(
        "policy boundary",
        true,
        ev.is_some_and(|e| e.record.at_boundary),
    );
    c.eq(
        "epoch after repair",
        "e1",
        ev.map(|e| e.record.epoch_after.to_string())
            .unwrap_or_default(),
    );
    c.eq("extension G_ext", 1, g_ext);
    c.eq("boundary-minor count", 23, n_bdry);
    let extra = t
        .contributions
        .iter()
        .filter(|r| r.microbatches == 9)
        .count();
    let plain = t
        .contributions
        .iter()
        .filter(|r| r.microbatches == 8)
        .count();
    trace.push(format!(
        "  extension: G_ext = {g_ext}, {extra} survivors add one microbatch, {plain} boundary-minors add none: {} + {} = {}",
        contrib,
        t.admitted - contrib,
        t.admitted
    ));
    c.eq("survivors adding a microbatch", 8, extra);
    c.eq("boundary-minors", 23, plain);
    c.eq("iteration total", 256, t.admitted);
    c.eq("distinct stream indices", 256, t.distinct_indices);
    c.eq("buckets reduced under the new epoch", "e1", t.reduce_epoch);

    let next = &m[BOUNDARY_STEP as usize + 1];
    trace.push(format!(
        "iteration {}: layout {}, G = {}",
        next.iteration, next.layout, next.g_cur
    ));
    c.eq("next G_cur", 9, next.g_cur);
    c.eq(
        "next layout",
        "28 major / 1 minor / 1 major-spare / 1 minor-spare",
        next.layout,
    );
    let minor = next
        .contributions
        .iter()
        .find(|r| r.replica == ReplicaId(28));
    c.eq(
        "minor quota",
        4,
        minor.map(|r| r.microbatches).unwrap_or_default(),
    );
    c.eq("next iteration total", 256, next.admitted);

    let p = &m[PROMOTION_STEP as usize];
    let ev = p.events.first();
    let promotion = ev.and_then(|e| e.record.promotions.first());
    trace.push(format!(
        "iteration {PROMOTION_STEP}: minor replica 28 dies; {}",
        match promotion {
            Some(pr) => format!(
                "replica {} promoted {:?} -> {:?}, no boundary",
                pr.replica.0, pr.from, pr.to
            ),
            None => "no promotion".into(),
        }
    ));
    c.eq(
        "second failure is absorbed",
        false,
        ev.is_some_and(|e| e.record.at_boundary),
    );
    c.eq(
        "promoted replica",
        30,
        promotion.map(|pr| pr.replica.0).unwrap_or(u32::MAX),
    );
    c.eq(
        "promoted into",
        format!("{:?}", ReplicaRole::Minor),
        promotion
            .map(|pr| format!("{:?}", pr.to))
            .unwrap_or_default(),
    );
    c.eq(
        "promoted replica contribution",
        4,
        p.contributions
            .iter()
            .find(|r| r.replica == ReplicaId(30))
            .map(|r| r.microbatches)
            .unwrap_or_default(),
    );
    c.eq("G_cur unchanged", 9, p.g_cur);
    c.eq("iteration total after promotion", 256, p.admitted);
    let after = &m[PROMOTION_STEP as usize + 1];
    c.eq(
        "layout after promotion",
        "28 major / 1 minor / 1 major-spare / 0 minor-spare",
        after.layout,
    );
    c.eq("G_cur after promotion", 9, after.g_cur);

    Ok(Walkthrough {
        report,
        trace,
        checks: c.checks,
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_number_matches() {
        let w = super::run().unwrap();
        for c in &w.checks {
            assert!(
                c.passed(),
                "{}: expected {}, got {}",
                c.label,
                c.expected,
                c.actual
            );
        }
    }
}
