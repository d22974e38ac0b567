// SPDX-License-Identifier: Apache-2.0

//! The iteration state machine driving every replica in lockstep.
//!
//! One iteration: run microbatches up to the majors' bound, snapshot and
//! reduce each bucket, gate on a consensus, handle any failure (possibly
//! extending the bound), restore stale buckets, and repeat until the bound is
//! met. Then divide, step, and advance the policy if a boundary was crossed.

pub mod model;
pub mod stream;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buckets::{gradient_restoration, BucketLedger, RestoreOutcome};
use crate::comm::{CommError, Communicator, FailureRecord, WorkResult, WorkStatus};
use crate::par::Execution;
use crate::policy::{
    adaptive_policy_adjustment, assign_boundary_roles, assign_steady_roles, contribution_quota,
    executed_quota, policy_adjustment, policy_advancement, PolicyDecision, PolicyError, PolicyKind,
    PolicyState,
};
use crate::types::{ReplicaId, ReplicaRole, RoleCounts, WorldEpoch};

use model::{per_example_gradient, ModelKind, ToyModel};
use stream::DataStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainerError {
    #[error("all replicas have failed")]
    AllReplicasDead,
    #[error(transparent)]
    Comm(CommError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<CommError> for TrainerError {
    fn from(e: CommError) -> Self {
        match e {
            CommError::EmptyMembership => TrainerError::AllReplicasDead,
            other => TrainerError::Comm(other),
        }
    }
}

fn violation(msg: String) -> TrainerError {
    TrainerError::Policy(PolicyError::InvariantViolation(msg))
}

/// What the adaptive baseline divides the reduced gradient by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveDivisor {
    /// The original global batch `B`, so a shrunk batch also shrinks the step.
    #[default]
    GlobalBatch,
    /// The microbatches actually committed, `W_cur * G_cur`.
    Survivors,
}

/// Where in an iteration the simulator may kill replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncPoint {
    IterationStart,
    /// Before the collective on `bucket` in the `round`-th sync of the iteration.
    BeforeBucket {
        round: usize,
        bucket: usize,
    },
    BeforeConsensus {
        round: usize,
    },
}

pub trait FaultHook {
    /// Replicas that die at `point` of iteration `iteration`.
    fn kills_at(&mut self, iteration: u64, point: SyncPoint) -> Vec<ReplicaId>;
}

pub struct NoFaults;

impl FaultHook for NoFaults {
    fn kills_at(&mut self, _: u64, _: SyncPoint) -> Vec<ReplicaId> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub w_init: usize,
    pub g_init: usize,
    pub buckets: usize,
    pub model: ModelKind,
    pub learning_rate: f64,
    pub policy: PolicyKind,
    pub adaptive_divisor: AdaptiveDivisor,
    pub execution: Execution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Microbatch {
    Counted,
    Shadow,
    Zeroed,
}

/// What a replica may do with its next microbatches.
#[derive(Debug, Clone, Copy)]
struct Plan {
    spare: bool,
    counted: usize,
    target: usize,
    shadow: usize,
    shadow_quota: usize,
}

#[derive(Debug, Clone)]
pub struct ReplicaContext {
    pub id: ReplicaId,
    pub model: ToyModel,
    pub ledger: BucketLedger,
    cursor: u64,
    contrib_log: Vec<u64>,
    contrib_loss: Vec<f64>,
    shadow_log: Vec<u64>,
    shadow_loss: Vec<f64>,
}

impl ReplicaContext {
    fn new(id: ReplicaId, model: ToyModel, buckets: usize) -> Self {
        let len = model.params.len();
        ReplicaContext {
            id,
            model,
            ledger: BucketLedger::new(len, buckets),
            cursor: 0,
            contrib_log: Vec::new(),
            contrib_loss: Vec::new(),
            shadow_log: Vec::new(),
            shadow_loss: Vec::new(),
        }
    }

    /// Stream indices this replica has counted toward the batch so far.
    pub fn contribution_log(&self) -> &[u64] {
        &self.contrib_log
    }

    fn begin_iteration(&mut self) {
        self.ledger.reset();
        self.contrib_log.clear();
        self.contrib_loss.clear();
        self.shadow_log.clear();
        self.shadow_loss.clear();
    }

    fn run(&mut self, steps: usize, mut plan: Plan, stream: &DataStream) -> Vec<Microbatch> {
        let mut kinds = Vec::with_capacity(steps);
        for _ in 0..steps {
            let kind = if plan.counted < plan.target {
                plan.counted += 1;
                Microbatch::Counted
            } else if plan.spare && plan.shadow < plan.shadow_quota {
                plan.shadow += 1;
                Microbatch::Shadow
            } else {
                kinds.push(Microbatch::Zeroed);
                continue;
            };
            let index = stream.global_index(self.id, self.cursor);
            self.cursor += 1;
            let ex = stream.example(index);
            let loss = self.model.loss(&ex);
            self.ledger
                .accumulate(&per_example_gradient(&self.model, &ex));
            if kind == Microbatch::Counted {
                self.contrib_log.push(index);
                self.contrib_loss.push(loss);
            } else {
                self.shadow_log.push(index);
                self.shadow_loss.push(loss);
            }
            kinds.push(kind);
        }
        kinds
    }

    fn promote(&mut self) {
        self.contrib_log.append(&mut self.shadow_log);
        self.contrib_loss.append(&mut self.shadow_loss);
    }

    fn drop_shadow(&mut self) {
        self.shadow_log.clear();
        self.shadow_loss.clear();
        self.ledger.discard();
    }
}

/// A failure as seen by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub record: FailureRecord,
    /// Microbatches each survivor had executed when the failure was handled.
    pub microbatch: usize,
    pub epoch: WorldEpoch,
    pub w_cur: usize,
    pub decision: PolicyDecision,
    /// Observed only after every bucket had reduced; the iteration commits as is.
    pub deferred: bool,
}

/// Work done in one iteration, in units the cost model charges for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkTally {
    pub microbatch_steps: usize,
    pub sync_rounds: usize,
    pub bucket_reductions: usize,
    pub restored_buckets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub iteration: u64,
    pub loss: f64,
    /// Reduced gradient after division, as applied by every survivor.
    pub committed_gradient: Vec<f64>,
    pub contributions: BTreeMap<ReplicaId, usize>,
    pub admitted: usize,
    pub admitted_indices: Vec<u64>,
    /// Membership epoch the step was committed under. A failure first seen by
    /// the consensus is repaired after the commit and shows up next iteration.
    pub epoch: WorldEpoch,
    /// Membership epoch the committed buckets were reduced under.
    pub reduce_epoch: WorldEpoch,
    pub bucket_epochs: Vec<Option<WorldEpoch>>,
    /// Roles the iteration started with.
    pub layout: RoleCounts,
    pub g_cur: usize,
    /// Replicas alive at commit.
    pub w_cur: usize,
    pub boundary: bool,
    pub events: Vec<FailureEvent>,
    pub tally: WorkTally,
    pub params: Vec<f64>,
}

struct Admitted {
    per_replica: Vec<(ReplicaId, Vec<u64>, Vec<f64>)>,
}

#[derive(Default)]
struct IterState {
    p_major: usize,
    m_done: usize,
    boundary: bool,
    advance_after_commit: bool,
    events: Vec<FailureEvent>,
    tally: WorkTally,
}

pub struct Trainer {
    cfg: TrainerConfig,
    stream: DataStream,
    comm: Communicator,
    policy: PolicyState,
    replicas: Vec<ReplicaContext>,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, stream: DataStream) -> Self {
        let w = cfg.w_init;
        let model = ToyModel::zeros(cfg.model, stream.dim());
        let replicas = (0..w as u32)
            .map(|r| ReplicaContext::new(ReplicaId(r), model.clone(), cfg.buckets))
            .collect();
        Trainer {
            comm: Communicator::all_major(w as u32),
            policy: PolicyState::initial(w, cfg.g_init),
            cfg,
            stream,
            replicas,
            iteration: 0,
        }
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn replicas(&self) -> &[ReplicaContext] {
        &self.replicas
    }

    pub fn stream(&self) -> &DataStream {
        &self.stream
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Parameters shared by all survivors.
    pub fn params(&self) -> &[f64] {
        &self.replicas[0].model.params
    }

    pub fn model(&self) -> &ToyModel {
        &self.replicas[0].model
    }

    pub fn run_iteration(
        &mut self,
        hook: &mut dyn FaultHook,
    ) -> Result<IterationOutcome, TrainerError> {
        let it = self.iteration;
        let layout = self.comm.role_counts();
        let g_cur = self.policy.g_cur;
        self.comm.begin_iteration();
        for ctx in &mut self.replicas {
            ctx.begin_iteration();
        }
        let members: Vec<ReplicaId> = self.comm.members().iter().copied().collect();
        for id in members {
            let role = self.comm.role(id).expect("member has a role");
            self.comm
                .set_target(id, contribution_quota(&self.policy, role, false))?;
        }

        let mut st = IterState {
            p_major: self.policy.g_cur,
            ..Default::default()
        };
        for id in hook.kills_at(it, SyncPoint::IterationStart) {
            self.comm.inject_failure(id);
        }

        let mut round = 0;
        let mut deferred_view = None;
        loop {
            self.microbatch_phase(&mut st)?;
            st.tally.sync_rounds += 1;

            let mut round_failed = false;
            for k in 0..self.cfg.buckets {
                for id in hook.kills_at(it, SyncPoint::BeforeBucket { round, bucket: k }) {
                    self.comm.inject_failure(id);
                }
                if self.comm.is_quiesced() {
                    continue;
                }
                let epoch = self.comm.epoch();
                for ctx in &mut self.replicas {
                    ctx.ledger.snapshot_and_tag(k, epoch);
                }
                let work = {
                    let mut bufs: Vec<(ReplicaId, &mut [f64])> = self
                        .replicas
                        .iter_mut()
                        .map(|c| (c.id, c.ledger.bucket_mut(k).data.as_mut_slice()))
                        .collect();
                    self.comm.ulfm_allreduce(&mut bufs)?
                };
                match work.status {
                    WorkStatus::Success => {
                        for ctx in &mut self.replicas {
                            ctx.ledger.mark_reduced(k, epoch);
                        }
                        st.tally.bucket_reductions += 1;
                    }
                    WorkStatus::Failure => {
                        round_failed = true;
                        self.handle_work_failure(work, &mut st, false)?;
                    }
                    WorkStatus::Noop => {}
                }
            }

            for id in hook.kills_at(it, SyncPoint::BeforeConsensus { round }) {
                self.comm.inject_failure(id);
            }
            let view = self.admitted_view();
            let view_epoch = self.comm.epoch();
            let work = self.comm.ulfm_consensus()?;
            if work.is_failure() {
                if round_failed {
                    self.handle_work_failure(work, &mut st, false)?;
                } else {
                    // every bucket already reduced under one membership
                    self.handle_work_failure(work, &mut st, true)?;
                    deferred_view = Some((view, view_epoch));
                    break;
                }
            }

            loop {
                let restoration = {
                    let mut ledgers: Vec<(ReplicaId, &mut BucketLedger)> = self
                        .replicas
                        .iter_mut()
                        .map(|c| (c.id, &mut c.ledger))
                        .collect();
                    gradient_restoration(&mut ledgers, &mut self.comm)?
                };
                st.tally.restored_buckets += restoration.rewound;
                st.tally.bucket_reductions += restoration.re_reduced;
                match restoration.outcome {
                    RestoreOutcome::Committed => break,
                    RestoreOutcome::ReenterFailureHandling(work) => {
                        self.handle_work_failure(work, &mut st, false)?;
                    }
                }
            }

            round += 1;
            if st.m_done >= st.p_major {
                break;
            }
        }

        let (admitted, commit_epoch) =
            deferred_view.unwrap_or_else(|| (self.admitted_view(), self.comm.epoch()));
        self.commit(it, admitted, commit_epoch, st, layout, g_cur)
    }

    fn microbatch_phase(&mut self, st: &mut IterState) -> Result<(), TrainerError> {
        let steps = st.p_major.saturating_sub(st.m_done);
        if steps == 0 {
            return Ok(());
        }
        let crashed = self.comm.pending_failures().clone();
        let mut jobs = Vec::new();
        for ctx in self
            .replicas
            .iter_mut()
            .filter(|c| !crashed.contains(&c.id))
        {
            let role = self.comm.role(ctx.id).expect("live replica has a role");
            let c = self.comm.contribution(ctx.id).unwrap_or_default();
            let plan = Plan {
                spare: role.is_spare(),
                counted: c.counted(),
                target: self.comm.target(ctx.id).unwrap_or(0),
                shadow: c.shadow,
                shadow_quota: if role.is_spare() {
                    executed_quota(&self.policy, role)
                } else {
                    0
                },
            };
            jobs.push((ctx, plan, Vec::new()));
        }
        let stream = &self.stream;
        self.cfg
            .execution
            .for_each_mut(&mut jobs, |(ctx, plan, kinds)| {
                *kinds = ctx.run(steps, *plan, stream);
            });
        let records: Vec<(ReplicaId, Vec<Microbatch>)> = jobs
            .into_iter()
            .map(|(ctx, _, kinds)| (ctx.id, kinds))
            .collect();
        for (id, kinds) in records {
            for kind in kinds {
                match kind {
                    Microbatch::Counted => self.comm.record_microbatch(id, false)?,
                    Microbatch::Shadow => self.comm.record_microbatch(id, true)?,
                    Microbatch::Zeroed => {}
                }
            }
        }
        st.m_done = st.p_major;
        st.tally.microbatch_steps += steps;
        Ok(())
    }

    fn handle_work_failure(
        &mut self,
        work: WorkResult,
        st: &mut IterState,
        deferred: bool,
    ) -> Result<(), TrainerError> {
        let record = work.record.expect("failure result carries a record");
        self.replicas
            .retain(|c| !record.failed_replicas.contains(&c.id));
        if self.replicas.is_empty() {
            return Err(TrainerError::AllReplicasDead);
        }

        let decision = match self.cfg.policy {
            PolicyKind::Static => policy_adjustment(&mut self.policy, &record)?,
            PolicyKind::Adaptive => {
                self.policy.w_cur = record.survivors();
                adaptive_policy_adjustment(&record)
            }
        };

        if deferred {
            if decision.at_boundary {
                st.boundary = true;
                st.advance_after_commit = true;
            }
        } else {
            for p in &record.promotions {
                if let Some(ctx) = self.replicas.iter_mut().find(|c| c.id == p.replica) {
                    ctx.promote();
                }
            }
            for ctx in &mut self.replicas {
                ctx.ledger.latch_restore(decision.restore_mode);
                ctx.ledger.clear_reduced_marks();
            }
            if decision.at_boundary {
                self.enter_boundary_pass(&decision, st)?;
            }
        }

        st.events.push(FailureEvent {
            w_cur: record.survivors(),
            microbatch: st.m_done,
            epoch: self.comm.epoch(),
            record,
            decision,
            deferred,
        });
        Ok(())
    }

    fn enter_boundary_pass(
        &mut self,
        decision: &PolicyDecision,
        st: &mut IterState,
    ) -> Result<(), TrainerError> {
        let g_ext = decision.g_ext.expect("boundary decision has an extension");
        let n_bdry = decision.n_bdry.expect("boundary decision has a split");
        if decision.should_quiesce {
            self.comm.set_quiesce(true);
        }
        st.boundary = true;
        st.advance_after_commit = true;

        let roles = assign_boundary_roles(self.comm.members().iter().copied(), n_bdry);
        for (id, role) in roles {
            if self.comm.role(id).is_some_and(ReplicaRole::is_spare) {
                if let Some(ctx) = self.replicas.iter_mut().find(|c| c.id == id) {
                    ctx.drop_shadow();
                }
                self.comm.discard_shadow(id);
            }
            self.comm.set_role(id, role)?;
            let counted = self.comm.contribution(id).unwrap_or_default().counted();
            let extra = match role {
                ReplicaRole::BoundaryMinor => g_ext - 1,
                _ => g_ext,
            };
            self.comm.set_target(id, counted + extra)?;
        }
        self.comm.set_boundary_pass(true);
        st.p_major = st.m_done + g_ext;
        Ok(())
    }

    /// Counted work of every replica whose last reduction was not zeroed.
    fn admitted_view(&self) -> Admitted {
        Admitted {
            per_replica: self
                .replicas
                .iter()
                .filter(|c| self.comm.role(c.id).is_some_and(|r| !r.is_spare()))
                .map(|c| (c.id, c.contrib_log.clone(), c.contrib_loss.clone()))
                .collect(),
        }
    }

    fn commit(
        &mut self,
        it: u64,
        admitted: Admitted,
        commit_epoch: WorldEpoch,
        st: IterState,
        layout: RoleCounts,
        g_cur: usize,
    ) -> Result<IterationOutcome, TrainerError> {
        let grad_sum = self.replicas[0].ledger.flatten();
        for ctx in &self.replicas[1..] {
            let other = ctx.ledger.flatten();
            let same = other.len() == grad_sum.len()
                && other
                    .iter()
                    .zip(&grad_sum)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(violation(format!(
                    "replica {} disagrees on the reduced gradient in iteration {it}",
                    ctx.id
                )));
            }
        }

        let bucket_epochs: Vec<Option<WorldEpoch>> = self.replicas[0]
            .ledger
            .buckets()
            .iter()
            .map(|b| b.reduced_under)
            .collect();
        let distinct: BTreeSet<_> = bucket_epochs.iter().collect();
        let reduce_epoch = match (distinct.len(), bucket_epochs.first()) {
            (1, Some(Some(e))) => *e,
            _ => {
                return Err(violation(format!(
                    "iteration {it} buckets were not reduced under a single membership: {bucket_epochs:?}"
                )))
            }
        };
        if reduce_epoch != commit_epoch {
            return Err(violation(format!(
                "iteration {it} reduced under {reduce_epoch} but commits at {commit_epoch}"
            )));
        }

        let mut contributions = BTreeMap::new();
        let mut admitted_indices = Vec::new();
        let mut loss_sum = 0.0;
        for (id, log, losses) in &admitted.per_replica {
            contributions.insert(*id, log.len());
            admitted_indices.extend_from_slice(log);
            for l in losses {
                loss_sum += l;
            }
        }
        let n = admitted_indices.len();
        let loss = if n == 0 { 0.0 } else { loss_sum / n as f64 };

        let divisor = match (self.cfg.policy, self.cfg.adaptive_divisor) {
            (PolicyKind::Adaptive, AdaptiveDivisor::Survivors) => n.max(1) as f64,
            _ => self.policy.global_batch() as f64,
        };
        for ctx in &mut self.replicas {
            ctx.model
                .sgd_step(&grad_sum, divisor, self.cfg.learning_rate);
        }
        let params = self.replicas[0].model.params.clone();
        for ctx in &self.replicas[1..] {
            if ctx
                .model
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(violation(format!(
                    "replica {} diverged after iteration {it}",
                    ctx.id
                )));
            }
        }

        if st.advance_after_commit && self.cfg.policy == PolicyKind::Static {
            self.policy.w_cur = self.comm.size();
            self.policy = policy_advancement(&self.policy);
            let roles =
                assign_steady_roles(&self.policy.layout(), self.comm.members().iter().copied());
            for (id, role) in roles {
                self.comm.set_role(id, role)?;
            }
        }
        self.iteration += 1;

        Ok(IterationOutcome {
            iteration: it,
            loss,
            committed_gradient: grad_sum.iter().map(|g| g / divisor).collect(),
            contributions,
            admitted: n,
            admitted_indices,
            epoch: commit_epoch,
            reduce_epoch,
            bucket_epochs,
            layout,
            g_cur,
            w_cur: self.comm.size(),
            boundary: st.boundary,
            events: st.events,
            tally: st.tally,
            params,
        })
    }
}
