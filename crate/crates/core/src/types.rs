// SPDX-License-Identifier: Apache-2.0

//! Identifiers and small value types shared by every layer.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a data-parallel replica in the initial world (`0..W_init`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl From<u32> for ReplicaId {
    fn from(v: u32) -> Self {
        ReplicaId(v)
    }
}

/// Monotone membership counter of a communicator; bumped once per repair.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct WorldEpoch(pub u64);

impl WorldEpoch {
    pub fn next(self) -> WorldEpoch {
        WorldEpoch(self.0 + 1)
    }
}

impl fmt::Display for WorldEpoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// What a replica contributes to the current iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaRole {
    Major,
    Minor,
    MajorSpare,
    MinorSpare,
    /// Exists only while a boundary pass is extending the iteration.
    BoundaryMinor,
}

impl ReplicaRole {
    pub fn is_spare(self) -> bool {
        matches!(self, ReplicaRole::MajorSpare | ReplicaRole::MinorSpare)
    }

    /// The spare kind able to take over this role without extending the iteration.
    pub fn backing_spare(self) -> Option<ReplicaRole> {
        match self {
            ReplicaRole::Major | ReplicaRole::BoundaryMinor => Some(ReplicaRole::MajorSpare),
            ReplicaRole::Minor => Some(ReplicaRole::MinorSpare),
            ReplicaRole::MajorSpare | ReplicaRole::MinorSpare => None,
        }
    }

    /// The role a spare shadows.
    pub fn counterpart(self) -> Option<ReplicaRole> {
        match self {
            ReplicaRole::MajorSpare => Some(ReplicaRole::Major),
            ReplicaRole::MinorSpare => Some(ReplicaRole::Minor),
            _ => None,
        }
    }
}

/// Population of each role; `(n_maj, n_min, n_ms, n_mi, n_bm)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleCounts {
    pub major: usize,
    pub minor: usize,
    pub major_spare: usize,
    pub minor_spare: usize,
    pub boundary_minor: usize,
}

impl RoleCounts {
    pub fn from_roles<'a>(roles: impl IntoIterator<Item = &'a ReplicaRole>) -> RoleCounts {
        let mut c = RoleCounts::default();
        for role in roles {
            c.bump(*role);
        }
        c
    }

    pub fn get(&self, role: ReplicaRole) -> usize {
        match role {
            ReplicaRole::Major => self.major,
            ReplicaRole::Minor => self.minor,
            ReplicaRole::MajorSpare => self.major_spare,
            ReplicaRole::MinorSpare => self.minor_spare,
            ReplicaRole::BoundaryMinor => self.boundary_minor,
        }
    }

    pub fn bump(&mut self, role: ReplicaRole) {
        match role {
            ReplicaRole::Major => self.major += 1,
            ReplicaRole::Minor => self.minor += 1,
            ReplicaRole::MajorSpare => self.major_spare += 1,
            ReplicaRole::MinorSpare => self.minor_spare += 1,
            ReplicaRole::BoundaryMinor => self.boundary_minor += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.major + self.minor + self.major_spare + self.minor_spare + self.boundary_minor
    }
}

impl fmt::Display for RoleCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} major / {} minor / {} major-spare / {} minor-spare",
            self.major, self.minor, self.major_spare, self.minor_spare
        )?;
        if self.boundary_minor > 0 {
            write!(f, " / {} boundary-minor", self.boundary_minor)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backing_spares() {
        assert_eq!(
            ReplicaRole::Major.backing_spare(),
            Some(ReplicaRole::MajorSpare)
        );
        assert_eq!(
            ReplicaRole::Minor.backing_spare(),
            Some(ReplicaRole::MinorSpare)
        );
        assert_eq!(ReplicaRole::MinorSpare.backing_spare(), None);
        assert_eq!(
            ReplicaRole::MajorSpare.counterpart(),
            Some(ReplicaRole::Major)
        );
    }

    #[test]
    fn counts_from_roles() {
        let roles = [
            ReplicaRole::Major,
            ReplicaRole::Major,
            ReplicaRole::Minor,
            ReplicaRole::MinorSpare,
        ];
        let c = RoleCounts::from_roles(&roles);
        assert_eq!(
            (c.major, c.minor, c.major_spare, c.minor_spare),
            (2, 1, 0, 1)
        );
        assert_eq!(c.total(), 4);
    }
}
