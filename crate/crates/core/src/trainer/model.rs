// SPDX-License-Identifier: Apache-2.0

//! Toy differentiable models.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stream::Example;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Least squares: loss `0.5 * (θ·x - y)^2`, gradient `(θ·x - y) x`.
    #[default]
    Linear,
    /// Loss `θ·x`: the gradient is the example's `x`, whatever θ is.
    ConstantGradient,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::ConstantGradient => "constant_gradient",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "constant_gradient" => Ok(ModelKind::ConstantGradient),
            other => Err(format!(
                "unknown model `{other}` (expected linear or constant_gradient)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub kind: ModelKind,
    pub params: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyModel {
    pub fn zeros(kind: ModelKind, dim: usize) -> Self {
        ToyModel {
            kind,
            params: vec![0.0; dim],
        }
    }

    pub fn loss(&self, ex: &Example) -> f64 {
        match self.kind {
            ModelKind::Linear => {
                let r = dot(&self.params, &ex.x) - ex.y;
                0.5 * r * r
            }
            ModelKind::ConstantGradient => dot(&self.params, &ex.x),
        }
    }

    /// Plain SGD on the averaged gradient `sum / divisor`.
    pub fn sgd_step(&mut self, grad_sum: &[f64], divisor: f64, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad_sum) {
            *p -= lr * (g / divisor);
        }
    }
}

pub fn per_example_gradient(model: &ToyModel, ex: &Example) -> Vec<f64> {
    match model.kind {
        ModelKind::Linear => {
            let r = dot(&model.params, &ex.x) - ex.y;
            ex.x.iter().map(|x| r * x).collect()
        }
        ModelKind::ConstantGradient => ex.x.clone(),
    }
}
