// SPDX-License-Identifier: Apache-2.0

//! Failure schedules: where and when replicas die.
//!
//! A schedule is a list of `(step, replica, local_rank, location)` entries,
//! stored as YAML. Generated schedules are a pure function of their
//! [`GenerationSpec`], which is kept alongside the entries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::trainer::{FaultHook, SyncPoint};
use crate::types::ReplicaId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InjectionPoint {
    /// Dead before the iteration's microbatches start.
    BeforeSync,
    /// Dead right before the collective on bucket `k` in the first sync round.
    DuringSync(usize),
    /// Dead after every bucket reduced, before the consensus and the step.
    AfterSyncBeforeStep,
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectionPoint::BeforeSync => f.write_str("before_sync"),
            InjectionPoint::DuringSync(k) => write!(f, "during_sync:{k}"),
            InjectionPoint::AfterSyncBeforeStep => f.write_str("after_sync"),
        }
    }
}

impl FromStr for InjectionPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "before_sync" => Ok(InjectionPoint::BeforeSync),
            "after_sync" => Ok(InjectionPoint::AfterSyncBeforeStep),
            _ => {
                let k = s
                    .strip_prefix("during_sync:")
                    .ok_or_else(|| format!("unknown location `{s}` (expected before_sync, during_sync:K or after_sync)"))?;
                k.parse()
                    .map(InjectionPoint::DuringSync)
                    .map_err(|_| format!("bad bucket index in location `{s}`"))
            }
        }
    }
}

impl TryFrom<String> for InjectionPoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InjectionPoint> for String {
    fn from(p: InjectionPoint) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub step: u64,
    pub replica: ReplicaId,
    /// The rank inside the replica that crashes; the whole replica goes down.
    #[serde(default)]
    pub local_rank: u32,
    pub location: InjectionPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocationWeights {
    pub before_sync: f64,
    pub during_sync: f64,
    pub after_sync: f64,
}

impl Default for LocationWeights {
    fn default() -> Self {
        LocationWeights {
            before_sync: 0.0,
            during_sync: 1.0,
            after_sync: 0.0,
        }
    }
}

impl LocationWeights {
    pub fn uniform() -> Self {
        LocationWeights {
            before_sync: 1.0,
            during_sync: 1.0,
            after_sync: 1.0,
        }
    }
}

impl FromStr for LocationWeights {
    type Err = String;

    /// `before_sync=1,during_sync=2,after_sync=1`; omitted keys are zero.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut w = LocationWeights {
            before_sync: 0.0,
            during_sync: 0.0,
            after_sync: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in `{part}`"))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("bad weight `{value}` for {key}"))?;
            match key.trim() {
                "before_sync" => w.before_sync = value,
                "during_sync" => w.during_sync = value,
                "after_sync" => w.after_sync = value,
                other => return Err(format!("unknown location `{other}`")),
            }
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub seed: u64,
    pub count: usize,
    /// Failures land in iterations `step_start..step_end`.
    pub step_start: u64,
    pub step_end: u64,
    pub replicas: usize,
    #[serde(default = "one")]
    pub ranks_per_replica: usize,
    #[serde(default = "one")]
    pub buckets: usize,
    #[serde(default)]
    pub weights: LocationWeights,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSchedule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSpec>,
    #[serde(default)]
    pub entries: Vec<ScheduleEntry>,
}

impl FailureSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_entries(mut entries: Vec<ScheduleEntry>) -> Self {
        entries.sort_by_key(|e| e.step);
        FailureSchedule {
            generation: None,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_yaml_str(text: &str) -> Result<Self, SimError> {
        let mut s: FailureSchedule =
            serde_yaml::from_str(text).map_err(|e| SimError::Parse(format!("schedule: {e}")))?;
        s.entries.sort_by_key(|e| e.step);
        Ok(s)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("schedule serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_yaml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_yaml_string()).map_err(|e| SimError::io(path, e))
    }

    /// Check every entry fits a world of `replicas` replicas with `buckets` buckets.
    pub fn validate(
        &self,
        replicas: usize,
        ranks_per_replica: usize,
        buckets: usize,
    ) -> Result<(), SimError> {
        for e in &self.entries {
            if e.replica.index() >= replicas {
                return Err(SimError::InvalidSpec(format!(
                    "schedule entry at step {} names replica {} but only {replicas} exist",
                    e.step, e.replica.0
                )));
            }
            if e.local_rank as usize >= ranks_per_replica {
                return Err(SimError::InvalidSpec(format!(
                    "schedule entry at step {} names local rank {} but replicas have {ranks_per_replica} ranks",
                    e.step, e.local_rank
                )));
            }
            if let InjectionPoint::DuringSync(k) = e.location {
                if k >= buckets {
                    return Err(SimError::InvalidSpec(format!(
                        "schedule entry at step {} targets bucket {k} but there are {buckets} buckets",
                        e.step
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn generate_schedule(spec: &GenerationSpec) -> Result<FailureSchedule, SimError> {
    if spec.count >= spec.replicas {
        return Err(SimError::InvalidSpec(format!(
            "failure count {} must be smaller than the replica count {} (at least one replica has to survive)",
            spec.count, spec.replicas
        )));
    }
    if spec.count > 0 && spec.step_start >= spec.step_end {
        return Err(SimError::InvalidSpec(format!(
            "step range {}..{} is empty",
            spec.step_start, spec.step_end
        )));
    }
    if spec.buckets == 0 || spec.ranks_per_replica == 0 {
        return Err(SimError::InvalidSpec(
            "buckets and ranks_per_replica must be positive".into(),
        ));
    }
    let w = &spec.weights;
    let locations = WeightedIndex::new([w.before_sync, w.during_sync, w.after_sync])
        .map_err(|e| SimError::InvalidSpec(format!("location weights: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let victims = rand::seq::index::sample(&mut rng, spec.replicas, spec.count);
    let mut entries = Vec::with_capacity(spec.count);
    for replica in victims.iter() {
        let step = rng.random_range(spec.step_start..spec.step_end);
        let location = match locations.sample(&mut rng) {
            0 => InjectionPoint::BeforeSync,
            1 => InjectionPoint::DuringSync(rng.random_range(0..spec.buckets)),
            _ => InjectionPoint::AfterSyncBeforeStep,
        };
        let local_rank = rng.random_range(0..spec.ranks_per_replica) as u32;
        entries.push(ScheduleEntry {
            step,
            replica: ReplicaId(replica as u32),
            local_rank,
            location,
        });
    }
    entries.sort_by_key(|e| (e.step, e.replica));
    Ok(FailureSchedule {
        generation: Some(spec.clone()),
        entries,
    })
}

/// Feeds a schedule into the trainer's kill points.
pub struct ScheduleHook {
    by_step: BTreeMap<u64, Vec<ScheduleEntry>>,
}

impl ScheduleHook {
    pub fn new(schedule: &FailureSchedule) -> Self {
        let mut by_step: BTreeMap<u64, Vec<ScheduleEntry>> = BTreeMap::new();
        for e in &schedule.entries {
            by_step.entry(e.step).or_default().push(e.clone());
        }
        ScheduleHook { by_step }
    }
}

impl FaultHook for ScheduleHook {
    fn kills_at(&mut self, iteration: u64, point: SyncPoint) -> Vec<ReplicaId> {
        let Some(entries) = self.by_step.get(&iteration) else {
            return Vec::new();
        };
        entries
            .iter()
            .filter(|e| match (e.location, point) {
                (InjectionPoint::BeforeSync, SyncPoint::IterationStart) => true,
                (InjectionPoint::DuringSync(k), SyncPoint::BeforeBucket { round: 0, bucket }) => {
                    k == bucket
                }
                (InjectionPoint::AfterSyncBeforeStep, SyncPoint::BeforeConsensus { round: 0 }) => {
                    true
                }
                _ => false,
            })
            .map(|e| e.replica)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(seed: u64, count: usize) -> GenerationSpec {
        GenerationSpec {
            seed,
            count,
            step_start: 5,
            step_end: 20,
            replicas: 16,
            ranks_per_replica: 4,
            buckets: 3,
            weights: LocationWeights::default(),
        }
    }

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_schedule(&spec(1, 0)).unwrap().is_empty());
    }

    #[test]
    fn same_spec_same_bytes() {
        let a = generate_schedule(&spec(7, 3)).unwrap().to_yaml_string();
        let b = generate_schedule(&spec(7, 3)).unwrap().to_yaml_string();
        assert_eq!(a, b);
    }

    #[test]
    fn default_weights_are_all_during_sync() {
        let s = generate_schedule(&spec(7, 3)).unwrap();
        assert_eq!(s.len(), 3);
        for e in &s.entries {
            assert!(matches!(e.location, InjectionPoint::DuringSync(k) if k < 3));
            assert!((5..20).contains(&e.step));
        }
    }

    #[test]
    fn too_many_failures_is_rejected() {
        let err = generate_schedule(&spec(0, 16)).unwrap_err();
        assert!(err.to_string().contains("smaller than the replica count"));
    }

    #[test]
    fn location_strings() {
        for p in [
            InjectionPoint::BeforeSync,
            InjectionPoint::DuringSync(3),
            InjectionPoint::AfterSyncBeforeStep,
        ] {
            assert_eq!(p.to_string().parse::<InjectionPoint>().unwrap(), p);
        }
        assert!("during_sync:x".parse::<InjectionPoint>().is_err());
        assert!("mid_step".parse::<InjectionPoint>().is_err());
    }

    #[test]
    fn parses_hand_written_yaml() {
        let text = "entries:\n  - step: 4\n    replica: 2\n    location: after_sync\n  - step: 1\n    replica: 0\n    local_rank: 3\n    location: during_sync:1\n";
        let s = FailureSchedule::from_yaml_str(text).unwrap();
        assert_eq!(s.entries[0].step, 1);
        assert_eq!(s.entries[0].location, InjectionPoint::DuringSync(1));
        assert!(s.validate(4, 4, 2).is_ok());
        assert!(s.validate(4, 4, 1).is_err());
        assert!(s.validate(2, 4, 2).is_err());
    }

    #[test]
    fn weights_from_flag() {
        let w: LocationWeights = "before_sync=1, after_sync=2".parse().unwrap();
        assert_eq!(
            (w.before_sync, w.during_sync, w.after_sync),
            (1.0, 0.0, 2.0)
        );
        assert!("nowhere=1".parse::<LocationWeights>().is_err());
    }

    proptest! {
        #[test]
        fn generate_then_parse_round_trips(seed in any::<u64>(), count in 0usize..15) {
            let mut sp = spec(seed, count);
            sp.weights = LocationWeights::uniform();
            let s = generate_schedule(&sp).unwrap();
            prop_assert_eq!(FailureSchedule::from_yaml_str(&s.to_yaml_string()).unwrap(), s.clone());
            let mut replicas: Vec<_> = s.entries.iter().map(|e| e.replica).collect();
            replicas.sort();
            replicas.dedup();
            prop_assert_eq!(replicas.len(), count);
            prop_assert!(s.entries.windows(2).all(|w| w[0].step <= w[1].step));
        }
    }
}
