// SPDX-License-Identifier: Apache-2.0

//! Simulated fault-tolerant cross-replica communicator.
//!
//! Every collective runs the same guarded sequence: detect dead members,
//! repair (shrink the membership and bump the world epoch), record an agreed
//! [`FailureRecord`] and return early; only a healthy membership reaches the
//! reduce step. Collectives are atomic rounds: the caller hands over every
//! member's buffer at once and every member observes the same result.
//!
//! Besides membership the communicator carries the per-replica registers the
//! workload policy needs: role flags, contribution counters (regular,
//! boundary-pass and shadow parts) and per-replica quotas.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ReplicaId, ReplicaRole, RoleCounts, WorldEpoch};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("every replica has failed; the communicator has no members left")]
    EmptyMembership,
    #[error("replica {0} is not a member of the communicator")]
    NotAMember(ReplicaId),
    #[error("member {0} did not provide a buffer to the collective")]
    MissingBuffer(ReplicaId),
    #[error("buffer of {replica} has length {actual}, expected {expected}")]
    LengthMismatch {
        replica: ReplicaId,
        expected: usize,
        actual: usize,
    },
    #[error("no surviving spare can take over the vacated {0:?} role")]
    NoSpareAvailable(ReplicaRole),
}

/// Microbatches a replica has run this iteration, split by how they count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contribution {
    /// Counted toward the global batch during the regular pass.
    pub regular: usize,
    /// Counted toward the global batch during a boundary extension.
    pub boundary: usize,
    /// Executed by a spare but zeroed at reduce time.
    pub shadow: usize,
}

impl Contribution {
    pub fn counted(&self) -> usize {
        self.regular + self.boundary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promotion {
    pub replica: ReplicaId,
    pub from: ReplicaRole,
    pub to: ReplicaRole,
}

/// Post-failure view agreed on by every survivor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub failed_replicas: BTreeSet<ReplicaId>,
    /// Pre-failure roles of the failed replicas.
    pub failed_roles: RoleCounts,
    /// Survivors per role after any promotion.
    pub role_counts: RoleCounts,
    pub contrib_regular: usize,
    pub contrib_boundary: usize,
    pub at_boundary: bool,
    pub epoch_after: WorldEpoch,
    pub promotions: Vec<Promotion>,
}

impl FailureRecord {
    /// `C_cur`: microbatches survivors have counted so far this iteration.
    pub fn contrib(&self) -> usize {
        self.contrib_regular + self.contrib_boundary
    }

    pub fn survivors(&self) -> usize {
        self.role_counts.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkStatus {
    Success,
    Noop,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkResult {
    pub status: WorkStatus,
    pub record: Option<FailureRecord>,
    pub reduced_epoch: Option<WorldEpoch>,
}

impl WorkResult {
    fn success(epoch: WorldEpoch) -> Self {
        WorkResult {
            status: WorkStatus::Success,
            record: None,
            reduced_epoch: Some(epoch),
        }
    }

    fn noop() -> Self {
        WorkResult {
            status: WorkStatus::Noop,
            record: None,
            reduced_epoch: None,
        }
    }

    fn failure(record: FailureRecord) -> Self {
        WorkResult {
            status: WorkStatus::Failure,
            record: Some(record),
            reduced_epoch: None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.status == WorkStatus::Failure
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Communicator {
    members: BTreeSet<ReplicaId>,
    crashed: BTreeSet<ReplicaId>,
    epoch: WorldEpoch,
    quiesced: bool,
    boundary_pass: bool,
    roles: BTreeMap<ReplicaId, ReplicaRole>,
    contrib: BTreeMap<ReplicaId, Contribution>,
    targets: BTreeMap<ReplicaId, usize>,
}

impl Communicator {
    /// A communicator over `roles.keys()`, all quotas zero.
    pub fn new(roles: BTreeMap<ReplicaId, ReplicaRole>) -> Self {
        let members: BTreeSet<_> = roles.keys().copied().collect();
        Communicator {
            contrib: members
                .iter()
                .map(|&r| (r, Contribution::default()))
                .collect(),
            targets: members.iter().map(|&r| (r, 0)).collect(),
            members,
            crashed: BTreeSet::new(),
            epoch: WorldEpoch::default(),
            quiesced: false,
            boundary_pass: false,
            roles,
        }
    }

    /// `w` replicas `0..w`, all majors.
    pub fn all_major(w: u32) -> Self {
        Self::new((0..w).map(|r| (ReplicaId(r), ReplicaRole::Major)).collect())
    }

    pub fn members(&self) -> &BTreeSet<ReplicaId> {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn is_member(&self, replica: ReplicaId) -> bool {
        self.members.contains(&replica)
    }

    pub fn epoch(&self) -> WorldEpoch {
        self.epoch
    }

    pub fn is_quiesced(&self) -> bool {
        self.quiesced
    }

    pub fn set_quiesce(&mut self, on: bool) {
        self.quiesced = on;
    }

    pub fn in_boundary_pass(&self) -> bool {
        self.boundary_pass
    }

    pub fn set_boundary_pass(&mut self, on: bool) {
        self.boundary_pass = on;
    }

    pub fn role(&self, replica: ReplicaId) -> Option<ReplicaRole> {
        self.roles.get(&replica).copied()
    }

    pub fn roles(&self) -> &BTreeMap<ReplicaId, ReplicaRole> {
        &self.roles
    }

    pub fn role_counts(&self) -> RoleCounts {
        RoleCounts::from_roles(self.roles.values())
    }

    pub fn set_role(&mut self, replica: ReplicaId, role: ReplicaRole) -> Result<(), CommError> {
        let slot = self
            .roles
            .get_mut(&replica)
            .ok_or(CommError::NotAMember(replica))?;
        *slot = role;
        Ok(())
    }

    pub fn contribution(&self, replica: ReplicaId) -> Option<Contribution> {
        self.contrib.get(&replica).copied()
    }

    pub fn target(&self, replica: ReplicaId) -> Option<usize> {
        self.targets.get(&replica).copied()
    }

    pub fn set_target(&mut self, replica: ReplicaId, quota: usize) -> Result<(), CommError> {
        let slot = self
            .targets
            .get_mut(&replica)
            .ok_or(CommError::NotAMember(replica))?;
        *slot = quota;
        Ok(())
    }

    /// Count one executed microbatch. Spares' work goes to the shadow
    /// counter; everything else lands in the regular or boundary part
    /// depending on whether a boundary pass is running.
    pub fn record_microbatch(&mut self, replica: ReplicaId, shadow: bool) -> Result<(), CommError> {
        let boundary = self.boundary_pass;
        let c = self
            .contrib
            .get_mut(&replica)
            .ok_or(CommError::NotAMember(replica))?;
        if shadow {
            c.shadow += 1;
        } else if boundary {
            c.boundary += 1;
        } else {
            c.regular += 1;
        }
        Ok(())
    }

    /// Forget a spare's shadow work (its executed microbatches will never count).
    pub fn discard_shadow(&mut self, replica: ReplicaId) {
        if let Some(c) = self.contrib.get_mut(&replica) {
            c.shadow = 0;
        }
    }

    /// Total counted microbatches over current members.
    pub fn contributed_total(&self) -> usize {
        self.contrib.values().map(Contribution::counted).sum()
    }

    /// Start-of-iteration reset: counters to zero, latches cleared.
    pub fn begin_iteration(&mut self) {
        for c in self.contrib.values_mut() {
            *c = Contribution::default();
        }
        self.quiesced = false;
        self.boundary_pass = false;
    }

    /// Simulated crash: the replica stops participating, and the next
    /// collective on this communicator observes the death.
    pub fn inject_failure(&mut self, replica: ReplicaId) {
        if self.members.contains(&replica) {
            self.crashed.insert(replica);
        }
    }

    /// Deaths that have happened but not yet been observed by a collective.
    pub fn pending_failures(&self) -> &BTreeSet<ReplicaId> {
        &self.crashed
    }

    /// Fault-aware sum all-reduce over one bucket.
    ///
    /// `buffers` holds one slice per live member (the dead cannot call in).
    /// On success each buffer holds the element-wise sum, folded in ascending
    /// replica order, with spares substituted by zeros outside a boundary pass.
    pub fn ulfm_allreduce(
        &mut self,
        buffers: &mut [(ReplicaId, &mut [f64])],
    ) -> Result<WorkResult, CommError> {
        if self.quiesced {
            return Ok(WorkResult::noop());
        }
        if let Some(record) = self.detect_repair_record()? {
            return Ok(WorkResult::failure(record));
        }
        self.reduce(buffers)?;
        Ok(WorkResult::success(self.epoch))
    }

    /// Barrier-like collective: detect, repair and record with no data motion.
    pub fn ulfm_consensus(&mut self) -> Result<WorkResult, CommError> {
        match self.detect_repair_record()? {
            Some(record) => Ok(WorkResult::failure(record)),
            None => Ok(WorkResult::success(self.epoch)),
        }
    }

    /// Hand the vacated role to the lowest-indexed surviving spare of the
    /// matching kind; its shadow work becomes counted work.
    pub fn elect_promotion(&mut self, vacated: ReplicaRole) -> Result<ReplicaId, CommError> {
        let spare_kind = vacated
            .backing_spare()
            .ok_or(CommError::NoSpareAvailable(vacated))?;
        let chosen = self
            .roles
            .iter()
            .find(|(_, &role)| role == spare_kind)
            .map(|(&r, _)| r)
            .ok_or(CommError::NoSpareAvailable(vacated))?;
        self.roles.insert(chosen, vacated);
        if let Some(c) = self.contrib.get_mut(&chosen) {
            if self.boundary_pass {
                c.boundary += c.shadow;
            } else {
                c.regular += c.shadow;
            }
            c.shadow = 0;
        }
        Ok(chosen)
    }

    fn detect_repair_record(&mut self) -> Result<Option<FailureRecord>, CommError> {
        if self.members.is_empty() {
            return Err(CommError::EmptyMembership);
        }
        // Detect
        let failed: BTreeSet<ReplicaId> =
            self.crashed.intersection(&self.members).copied().collect();
        self.crashed.clear();
        if failed.is_empty() {
            return Ok(None);
        }

        // Repair
        let mut failed_roles = RoleCounts::default();
        let mut failed_targets = Vec::new();
        for r in &failed {
            self.members.remove(r);
            let role = self.roles.remove(r).expect("member without a role");
            failed_roles.bump(role);
            self.contrib.remove(r);
            failed_targets.push((role, self.targets.remove(r).unwrap_or(0)));
        }
        self.epoch = self.epoch.next();
        if self.members.is_empty() {
            return Err(CommError::EmptyMembership);
        }

        // Record
        let survivors = self.role_counts();
        let at_boundary = failed_roles.major + failed_roles.boundary_minor > survivors.major_spare
            || failed_roles.minor > survivors.minor_spare;
        let mut promotions = Vec::new();
        if !at_boundary {
            for (role, target) in failed_targets {
                if role.is_spare() {
                    continue;
                }
                let from = role
                    .backing_spare()
                    .expect("non-spare role has a backing spare");
                let chosen = self.elect_promotion(role)?;
                self.targets.insert(chosen, target);
                promotions.push(Promotion {
                    replica: chosen,
                    from,
                    to: role,
                });
            }
        }
        let (contrib_regular, contrib_boundary) = self
            .contrib
            .values()
            .fold((0, 0), |(r, b), c| (r + c.regular, b + c.boundary));

        Ok(Some(FailureRecord {
            failed_replicas: failed,
            failed_roles,
            role_counts: self.role_counts(),
            contrib_regular,
            contrib_boundary,
            at_boundary,
            epoch_after: self.epoch,
            promotions,
        }))
    }

    fn reduce(&self, buffers: &mut [(ReplicaId, &mut [f64])]) -> Result<(), CommError> {
        for (r, _) in buffers.iter() {
            if !self.members.contains(r) {
                return Err(CommError::NotAMember(*r));
            }
        }
        let mut by_member: BTreeMap<ReplicaId, usize> = BTreeMap::new();
        for (pos, (r, _)) in buffers.iter().enumerate() {
            by_member.insert(*r, pos);
        }
        let len = buffers.first().map(|(_, b)| b.len()).unwrap_or(0);
        let mut sum = vec![0.0; len];
        for &member in &self.members {
            let pos = *by_member
                .get(&member)
                .ok_or(CommError::MissingBuffer(member))?;
            let buf = &buffers[pos].1;
            if buf.len() != len {
                return Err(CommError::LengthMismatch {
                    replica: member,
                    expected: len,
                    actual: buf.len(),
                });
            }
            let zeroed = self.roles[&member].is_spare() && !self.boundary_pass;
            if zeroed {
                continue;
            }
            for (acc, x) in sum.iter_mut().zip(buf.iter()) {
                *acc += *x;
            }
        }
        for (_, buf) in buffers.iter_mut() {
            buf.copy_from_slice(&sum);
        }
        Ok(())
    }
}
