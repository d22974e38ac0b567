// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::par::Execution;
use crate::policy::PolicyKind;
use crate::sim::cost::CostModel;
use crate::sim::SimError;
use crate::trainer::model::ModelKind;
use crate::trainer::stream::{DataStream, StreamKind};
use crate::trainer::{AdaptiveDivisor, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Initial replica count `W_init`.
    pub replicas: usize,
    /// Initial gradient accumulation `G_init`.
    pub grad_accum: usize,
    pub ranks_per_replica: usize,
    pub iterations: u64,
    pub buckets: usize,
    pub dim: usize,
    pub model: ModelKind,
    pub stream: StreamKind,
    pub seed: u64,
    pub noise: f64,
    pub learning_rate: f64,
    pub policy: PolicyKind,
    pub adaptive_divisor: AdaptiveDivisor,
    pub tokens_per_microbatch: u64,
    /// Held-out examples used for the final evaluation loss.
    pub eval_examples: usize,
    pub cost: CostModel,
    pub execution: Execution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            replicas: 8,
            grad_accum: 4,
            ranks_per_replica: 8,
            iterations: 50,
            buckets: 4,
            dim: 8,
            model: ModelKind::Linear,
            stream: StreamKind::Exchangeable,
            seed: 0,
            noise: 0.5,
            learning_rate: 0.1,
            policy: PolicyKind::Static,
            adaptive_divisor: AdaptiveDivisor::GlobalBatch,
            tokens_per_microbatch: 4096,
            eval_examples: 512,
            cost: CostModel::default(),
            execution: Execution::Parallel,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// `B = W_init * G_init`.
    pub fn global_batch(&self) -> usize {
        self.replicas * self.grad_accum
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| SimError::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("replicas", self.replicas),
            ("grad_accum", self.grad_accum),
            ("ranks_per_replica", self.ranks_per_replica),
            ("buckets", self.buckets),
            ("dim", self.dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(SimError::InvalidConfig(format!("{key} must be positive")));
            }
        }
        if self.replicas > u32::MAX as usize {
            return Err(SimError::InvalidConfig("replicas is too large".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(SimError::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(SimError::InvalidConfig(
                "noise must be finite and non-negative".into(),
            ));
        }
        self.cost.validate().map_err(SimError::InvalidConfig)
    }

    /// Hex SHA-256 of everything that affects results; the output path and
    /// execution mode are left out.
    pub fn config_hash(&self) -> String {
        let canonical = ExperimentConfig {
            output: None,
            execution: Execution::default(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            w_init: self.replicas,
            g_init: self.grad_accum,
            buckets: self.buckets,
            model: self.model,
            learning_rate: self.learning_rate,
            policy: self.policy,
            adaptive_divisor: self.adaptive_divisor,
            execution: self.execution,
        }
    }

    pub fn data_stream(&self) -> DataStream {
        DataStream::new(self.seed, self.replicas, self.dim, self.stream, self.noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "replicas = 32\ngrad_accum = 8\n[cost]\nreduce_fixed = 50.0\n",
        )
        .unwrap();
        assert_eq!(cfg.global_batch(), 256);
        assert_eq!(cfg.cost.reduce_fixed, 50.0);
        assert_eq!(cfg.cost.microbatch, 1.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("replicaz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("replicaz"), "{err}");
        let err = ExperimentConfig::from_toml_str("replicas = 0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("replicas"), "{err}");
        let err = ExperimentConfig::from_toml_str("policy = \"elastic\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("policy") || err.contains("elastic"), "{err}");
    }

    #[test]
    fn hash_ignores_output_and_execution() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output: Some("elsewhere.jsonl".into()),
            execution: Execution::Sequential,
            ..a.clone()
        };
        let c = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
