// SPDX-License-Identifier: Apache-2.0

//! Workload policy: who contributes how many microbatches.
//!
//! The static policy keeps the global batch `B = W_init * G_init` fixed. In
//! steady state it runs `n_maj` majors at `G_cur`, at most one minor at
//! `R_cur < G_cur`, and parks leftover replicas as spares. A failure that no
//! spare can absorb is a boundary: the survivors extend the iteration by
//! `G_ext` microbatches (some by `G_ext - 1`) to land exactly on `B`, and the
//! next iteration starts from a fresh steady layout.
//!
//! The adaptive policy is the baseline that simply lets the batch shrink.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buckets::RestoreMode;
use crate::comm::FailureRecord;
use crate::types::{ReplicaId, ReplicaRole};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Static,
    Adaptive,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Static => "static",
            PolicyKind::Adaptive => "adaptive",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(PolicyKind::Static),
            "adaptive" => Ok(PolicyKind::Adaptive),
            other => Err(format!(
                "unknown policy `{other}` (expected static or adaptive)"
            )),
        }
    }
}

/// Steady-state split of `B` microbatches over `W` replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteadyLayout {
    pub g_cur: usize,
    pub n_maj: usize,
    pub r_cur: usize,
    pub n_min: usize,
    pub n_ms: usize,
    pub n_mi: usize,
}

pub fn steady_layout(b: usize, w: usize) -> SteadyLayout {
    assert!(b > 0 && w > 0, "layout needs a positive batch and world");
    let g_cur = b.div_ceil(w);
    let n_maj = b / g_cur;
    let r_cur = b - n_maj * g_cur;
    let n_min = usize::from(r_cur > 0);
    let spares = w - n_maj - n_min;
    let n_mi = usize::from(n_min == 1 && spares >= 2);
    SteadyLayout {
        g_cur,
        n_maj,
        r_cur,
        n_min,
        n_ms: spares - n_mi,
        n_mi,
    }
}

/// Lowest ids become majors, then the minor, then major-spares, then the
/// minor-spare.
pub fn assign_steady_roles(
    layout: &SteadyLayout,
    members: impl IntoIterator<Item = ReplicaId>,
) -> BTreeMap<ReplicaId, ReplicaRole> {
    let bounds = [
        (layout.n_maj, ReplicaRole::Major),
        (layout.n_min, ReplicaRole::Minor),
        (layout.n_ms, ReplicaRole::MajorSpare),
        (layout.n_mi, ReplicaRole::MinorSpare),
    ];
    let mut roles = BTreeMap::new();
    let mut slots = bounds
        .iter()
        .flat_map(|&(n, role)| std::iter::repeat_n(role, n));
    for id in members {
        let role = slots
            .next()
            .expect("layout covers fewer replicas than members");
        roles.insert(id, role);
    }
    roles
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryExtension {
    pub g_ext: usize,
    pub n_bdry: usize,
}

/// Smallest `G_ext >= 1` with `C + W * G_ext >= B`, and how many survivors
/// can stop one microbatch short.
pub fn boundary_extension(b: usize, c: usize, w: usize) -> Result<BoundaryExtension, PolicyError> {
    if c > b {
        return Err(PolicyError::InvariantViolation(format!(
            "contributions {c} exceed the global batch {b}"
        )));
    }
    if w == 0 {
        return Err(PolicyError::InvariantViolation(
            "no survivors to extend the iteration".into(),
        ));
    }
    let g_ext = (b - c).div_ceil(w).max(1);
    Ok(BoundaryExtension {
        g_ext,
        n_bdry: c + w * g_ext - b,
    })
}

/// The `n_bdry` highest ids become boundary-minors, everyone else a major.
pub fn assign_boundary_roles(
    members: impl IntoIterator<Item = ReplicaId>,
    n_bdry: usize,
) -> BTreeMap<ReplicaId, ReplicaRole> {
    let ids: Vec<ReplicaId> = members.into_iter().collect();
    let cut = ids.len().saturating_sub(n_bdry);
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let role = if i < cut {
                ReplicaRole::Major
            } else {
                ReplicaRole::BoundaryMinor
            };
            (id, role)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyState {
    pub w_init: usize,
    pub g_init: usize,
    pub b: usize,
    pub w_cur: usize,
    pub g_cur: usize,
    pub r_cur: usize,
    pub n_maj: usize,
    pub n_min: usize,
    pub n_ms: usize,
    pub n_mi: usize,
    pub at_boundary: bool,
    pub g_ext: Option<usize>,
    pub n_bdry: Option<usize>,
}

impl PolicyState {
    /// Every replica a major at `G_init`.
    pub fn initial(w_init: usize, g_init: usize) -> Self {
        assert!(w_init > 0 && g_init > 0);
        PolicyState {
            w_init,
            g_init,
            b: w_init * g_init,
            w_cur: w_init,
            g_cur: g_init,
            r_cur: 0,
            n_maj: w_init,
            n_min: 0,
            n_ms: 0,
            n_mi: 0,
            at_boundary: false,
            g_ext: None,
            n_bdry: None,
        }
    }

    pub fn global_batch(&self) -> usize {
        self.b
    }

    pub fn layout(&self) -> SteadyLayout {
        SteadyLayout {
            g_cur: self.g_cur,
            n_maj: self.n_maj,
            r_cur: self.r_cur,
            n_min: self.n_min,
            n_ms: self.n_ms,
            n_mi: self.n_mi,
        }
    }

    fn refresh_counts(&mut self, event: &FailureRecord) {
        let rc = &event.role_counts;
        self.w_cur = rc.total();
        self.n_maj = rc.major;
        self.n_min = rc.minor;
        self.n_ms = rc.major_spare;
        self.n_mi = rc.minor_spare;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub restore_mode: RestoreMode,
    pub should_quiesce: bool,
    pub at_boundary: bool,
    pub g_ext: Option<usize>,
    pub n_bdry: Option<usize>,
    pub promoted: Option<ReplicaId>,
}

/// Static-policy response to a failure.
pub fn policy_adjustment(
    state: &mut PolicyState,
    event: &FailureRecord,
) -> Result<PolicyDecision, PolicyError> {
    let promoted = event.promotions.first().map(|p| p.replica);
    if !event.at_boundary {
        state.refresh_counts(event);
        return Ok(PolicyDecision {
            restore_mode: RestoreMode::Blocking,
            should_quiesce: false,
            at_boundary: false,
            g_ext: None,
            n_bdry: None,
            promoted,
        });
    }
    let w_cur = event.survivors();
    let ext = boundary_extension(state.b, event.contrib(), w_cur)?;
    state.w_cur = w_cur;
    state.at_boundary = true;
    state.g_ext = Some(ext.g_ext);
    state.n_bdry = Some(ext.n_bdry);
    state.n_maj = w_cur - ext.n_bdry;
    state.n_min = 0;
    state.n_ms = 0;
    state.n_mi = 0;
    Ok(PolicyDecision {
        restore_mode: RestoreMode::NonBlocking,
        should_quiesce: true,
        at_boundary: true,
        g_ext: Some(ext.g_ext),
        n_bdry: Some(ext.n_bdry),
        promoted,
    })
}

/// New steady state for the current survivors, applied after a boundary
/// iteration has committed.
pub fn policy_advancement(state: &PolicyState) -> PolicyState {
    let l = steady_layout(state.b, state.w_cur);
    PolicyState {
        g_cur: l.g_cur,
        r_cur: l.r_cur,
        n_maj: l.n_maj,
        n_min: l.n_min,
        n_ms: l.n_ms,
        n_mi: l.n_mi,
        at_boundary: false,
        g_ext: None,
        n_bdry: None,
        ..state.clone()
    }
}

/// Baseline: never extend, never quiesce; the batch shrinks with the world.
pub fn adaptive_policy_adjustment(event: &FailureRecord) -> PolicyDecision {
    PolicyDecision {
        restore_mode: RestoreMode::Blocking,
        should_quiesce: false,
        at_boundary: false,
        g_ext: None,
        n_bdry: None,
        promoted: event.promotions.first().map(|p| p.replica),
    }
}

/// Microbatches a role counts toward the global batch this iteration.
pub fn contribution_quota(state: &PolicyState, role: ReplicaRole, in_boundary_pass: bool) -> usize {
    let ext = if in_boundary_pass {
        state.g_ext.unwrap_or(0)
    } else {
        0
    };
    match role {
        ReplicaRole::Major => state.g_cur + ext,
        ReplicaRole::Minor => state.r_cur + ext,
        ReplicaRole::BoundaryMinor => (state.g_cur + ext).saturating_sub(1),
        ReplicaRole::MajorSpare | ReplicaRole::MinorSpare => 0,
    }
}

/// Microbatches a role executes; spares shadow their counterpart.
pub fn executed_quota(state: &PolicyState, role: ReplicaRole) -> usize {
    match role.counterpart() {
        Some(c) => contribution_quota(state, c, false),
        None => contribution_quota(state, role, false),
    }
}
