// SPDX-License-Identifier: Apache-2.0

//! Synthetic, replayable data stream partitioned across replicas.
//!
//! The example at global index `i` is a pure function of `(seed, i)`. Replica
//! `r` owns the slice `{ i : i mod W_init = r }` and walks it with a cursor,
//! so a failed replica's slice is simply never read again.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::types::ReplicaId;

const TRAIN_KEY: u64 = 0x7261_696e_0000_0001;
const EVAL_KEY: u64 = 0x6576_616c_0000_0002;
const TRUTH_KEY: u64 = 0x7472_7574_0000_0003;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// i.i.d. Gaussian inputs with noisy linear targets.
    #[default]
    Exchangeable,
    /// Every index yields the same example, with small dyadic inputs so
    /// that sums of any grouping are exact.
    Identical,
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKind::Exchangeable => "exchangeable",
            StreamKind::Identical => "identical",
        })
    }
}

impl FromStr for StreamKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exchangeable" => Ok(StreamKind::Exchangeable),
            "identical" => Ok(StreamKind::Identical),
            other => Err(format!(
                "unknown stream `{other}` (expected exchangeable or identical)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct DataStream {
    seed: u64,
    w_init: u64,
    dim: usize,
    kind: StreamKind,
    noise: f64,
    truth: Vec<f64>,
    fixed: Example,
}

fn keyed_rng(seed: u64, key: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key);
    rng.set_stream(stream);
    rng
}

impl DataStream {
    pub fn new(seed: u64, w_init: usize, dim: usize, kind: StreamKind, noise: f64) -> Self {
        let mut rng = keyed_rng(seed, TRUTH_KEY, 0);
        let truth: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = (0..dim)
            .map(|_| f64::from(rng.random_range(-8i32..=8)) / 4.0)
            .collect();
        let y = (0..dim)
            .map(|j| f64::from(rng.random_range(-8i32..=8)) / 4.0 * x[j])
            .sum();
        DataStream {
            seed,
            w_init: w_init as u64,
            dim,
            kind,
            noise,
            truth,
            fixed: Example { x, y },
        }
    }

    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parameters the exchangeable stream's targets are generated from.
    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    /// Global index of the `slot`-th example in `replica`'s slice.
    pub fn global_index(&self, replica: ReplicaId, slot: u64) -> u64 {
        slot * self.w_init + u64::from(replica.0)
    }

    pub fn example(&self, index: u64) -> Example {
        self.draw(TRAIN_KEY, index)
    }

    /// Held-out example, disjoint from every training index.
    pub fn eval_example(&self, index: u64) -> Example {
        self.draw(EVAL_KEY, index)
    }

    pub fn eval_set(&self, n: usize) -> Vec<Example> {
        (0..n as u64).map(|i| self.eval_example(i)).collect()
    }

    fn draw(&self, key: u64, index: u64) -> Example {
        match self.kind {
            StreamKind::Identical => self.fixed.clone(),
            StreamKind::Exchangeable => {
                let mut rng = keyed_rng(self.seed, key, index);
                let x: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let eps: f64 = rng.sample(StandardNormal);
                let y =
                    x.iter().zip(&self.truth).map(|(a, b)| a * b).sum::<f64>() + self.noise * eps;
                Example { x, y }
            }
        }
    }
}
