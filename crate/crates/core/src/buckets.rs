// SPDX-License-Identifier: Apache-2.0

//! Gradient buckets with pre-reduce snapshots and world-epoch tags.
//!
//! A bucket whose tag predates the communicator's current epoch was reduced
//! (or was being reduced) under a membership that no longer exists. Such
//! buckets are rewound to their snapshot and either re-reduced right away
//! ([`RestoreMode::Blocking`]) or left for the extended pass to reduce again
//! ([`RestoreMode::NonBlocking`]).

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::comm::{CommError, Communicator, WorkResult, WorkStatus};
use crate::types::{ReplicaId, WorldEpoch};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBucket {
    pub index: usize,
    pub data: Vec<f64>,
    pub snapshot: Option<Vec<f64>>,
    pub epoch_tag: Option<WorldEpoch>,
    pub reduced_under: Option<WorldEpoch>,
}

impl GradientBucket {
    fn clear_marks(&mut self) {
        self.snapshot = None;
        self.epoch_tag = None;
        self.reduced_under = None;
    }
}

/// Ordered by severity so that latching keeps the strongest pending mode.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RestoreMode {
    #[default]
    Skip,
    Blocking,
    NonBlocking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketLedger {
    buckets: Vec<GradientBucket>,
    pending_restore: RestoreMode,
}

/// `k` contiguous slices of `0..len`; the last one takes the remainder.
pub fn partition(len: usize, k: usize) -> Vec<Range<usize>> {
    assert!(k > 0, "bucket count must be positive");
    let step = len / k;
    (0..k)
        .map(|i| {
            let start = i * step;
            let end = if i + 1 == k { len } else { start + step };
            start..end
        })
        .collect()
}

impl BucketLedger {
    /// Zeroed ledger over a flat gradient of `len` values split into `k` buckets.
    pub fn new(len: usize, k: usize) -> Self {
        Self::from_data(
            partition(len, k)
                .into_iter()
                .map(|r| vec![0.0; r.len()])
                .collect(),
        )
    }

    pub fn from_data(data: Vec<Vec<f64>>) -> Self {
        BucketLedger {
            buckets: data
                .into_iter()
                .enumerate()
                .map(|(index, data)| GradientBucket {
                    index,
                    data,
                    snapshot: None,
                    epoch_tag: None,
                    reduced_under: None,
                })
                .collect(),
            pending_restore: RestoreMode::Skip,
        }
    }

    pub fn buckets(&self) -> &[GradientBucket] {
        &self.buckets
    }

    pub fn bucket(&self, index: usize) -> &GradientBucket {
        &self.buckets[index]
    }

    pub fn bucket_mut(&mut self, index: usize) -> &mut GradientBucket {
        &mut self.buckets[index]
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Add a flat gradient into the buckets, slice by slice.
    pub fn accumulate(&mut self, grad: &[f64]) {
        let mut offset = 0;
        for b in &mut self.buckets {
            let n = b.data.len();
            for (acc, g) in b.data.iter_mut().zip(&grad[offset..offset + n]) {
                *acc += *g;
            }
            offset += n;
        }
        debug_assert_eq!(offset, grad.len());
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buckets
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    /// Start-of-iteration state: zero data, no snapshots, nothing pending.
    pub fn reset(&mut self) {
        for b in &mut self.buckets {
            b.data.iter_mut().for_each(|x| *x = 0.0);
            b.clear_marks();
        }
        self.pending_restore = RestoreMode::Skip;
    }

    /// Drop everything accumulated so far, snapshots included.
    pub fn discard(&mut self) {
        for b in &mut self.buckets {
            b.data.iter_mut().for_each(|x| *x = 0.0);
            b.clear_marks();
        }
    }

    pub fn snapshot_and_tag(&mut self, index: usize, epoch: WorldEpoch) {
        let b = &mut self.buckets[index];
        b.snapshot = Some(b.data.clone());
        b.epoch_tag = Some(epoch);
    }

    /// Indices of snapshotted buckets tagged before `current`.
    pub fn classify_stale(&self, current: WorldEpoch) -> BTreeSet<usize> {
        self.buckets
            .iter()
            .filter(|b| b.epoch_tag.is_some_and(|tag| tag < current))
            .map(|b| b.index)
            .collect()
    }

    /// Copy the snapshot back into the data. Returns false if there was none.
    pub fn rewind(&mut self, index: usize) -> bool {
        let b = &mut self.buckets[index];
        match &b.snapshot {
            Some(s) => {
                b.data.copy_from_slice(s);
                true
            }
            None => false,
        }
    }

    pub fn mark_reduced(&mut self, index: usize, epoch: WorldEpoch) {
        self.buckets[index].reduced_under = Some(epoch);
    }

    /// Forget every "already reduced" mark; a new epoch made them stale.
    pub fn clear_reduced_marks(&mut self) {
        for b in &mut self.buckets {
            b.reduced_under = None;
        }
    }

    pub fn pending_restore(&self) -> RestoreMode {
        self.pending_restore
    }

    /// Latch a restore mode, keeping the stronger of the old and new one.
    pub fn latch_restore(&mut self, mode: RestoreMode) {
        self.pending_restore = self.pending_restore.max(mode);
    }

    fn clear_snapshots(&mut self) {
        for b in &mut self.buckets {
            b.clear_marks();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RestoreOutcome {
    Committed,
    /// A re-reduce hit another failure; the caller must handle it and retry.
    ReenterFailureHandling(WorkResult),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    pub outcome: RestoreOutcome,
    pub mode: RestoreMode,
    /// Stale buckets rewound (counted once per bucket index, not per replica).
    pub rewound: usize,
    /// Successful bucket re-reductions.
    pub re_reduced: usize,
}

/// Restore stale buckets on every surviving replica's ledger.
///
/// `ledgers` must hold exactly the live members of `comm`. The pending mode
/// is read from the ledgers, which all carry the same latch.
pub fn gradient_restoration(
    ledgers: &mut [(ReplicaId, &mut BucketLedger)],
    comm: &mut Communicator,
) -> Result<Restoration, CommError> {
    let mode = ledgers
        .iter()
        .map(|(_, l)| l.pending_restore)
        .max()
        .unwrap_or_default();
    let current = comm.epoch();
    let stale: BTreeSet<usize> = ledgers
        .iter()
        .flat_map(|(_, l)| l.classify_stale(current))
        .collect();

    let mut restoration = Restoration {
        outcome: RestoreOutcome::Committed,
        mode,
        rewound: 0,
        re_reduced: 0,
    };
    match mode {
        RestoreMode::Skip => return Ok(restoration),
        RestoreMode::NonBlocking => {
            for (_, ledger) in ledgers.iter_mut() {
                for &i in &stale {
                    ledger.rewind(i);
                }
                ledger.clear_snapshots();
                ledger.pending_restore = RestoreMode::Skip;
            }
            restoration.rewound = stale.len();
            comm.set_quiesce(false);
        }
        RestoreMode::Blocking => {
            for &i in &stale {
                for (_, ledger) in ledgers.iter_mut() {
                    ledger.rewind(i);
                }
                restoration.rewound += 1;
                let work = {
                    let mut bufs: Vec<(ReplicaId, &mut [f64])> = ledgers
                        .iter_mut()
                        .map(|(r, l)| (*r, l.buckets[i].data.as_mut_slice()))
                        .collect();
                    comm.ulfm_allreduce(&mut bufs)?
                };
                match work.status {
                    WorkStatus::Success => {
                        let epoch = work.reduced_epoch.unwrap_or(current);
                        for (_, ledger) in ledgers.iter_mut() {
                            let b = &mut ledger.buckets[i];
                            b.epoch_tag = Some(epoch);
                            b.reduced_under = Some(epoch);
                        }
                        restoration.re_reduced += 1;
                    }
                    WorkStatus::Failure => {
                        restoration.outcome = RestoreOutcome::ReenterFailureHandling(work);
                        return Ok(restoration);
                    }
                    WorkStatus::Noop => {}
                }
            }
            for (_, ledger) in ledgers.iter_mut() {
                ledger.pending_restore = RestoreMode::Skip;
            }
            comm.set_quiesce(false);
        }
    }
    Ok(restoration)
}
