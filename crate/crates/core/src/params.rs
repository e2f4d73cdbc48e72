//! Named learnable arrays shared by blocks, models, the analyzer and the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter does, which decides how it is counted and decayed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormAffine,
    LayerScale,
}

impl ParamRole {
    /// Whether the array is counted by the bias-free closed forms.
    pub fn is_weight(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Flat, ordered collection of parameters. Insertion order is creation order,
/// which is also the order used by serialization and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalars across every array.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalars held in `Weight` arrays only.
    pub fn weight_len(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.is_weight())
            .map(|p| p.value.len())
            .sum()
    }
}

/// Initialization policy used when creating parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal weights, zero biases, unit norm gains.
    TruncNormal { std: f64 },
    /// Uniform weights and biases in `[-scale, scale]`, gains near one.
    /// Used by gradient checks so every path carries signal.
    Uniform { scale: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::TruncNormal { std: 0.02 }
    }
}

/// Creates parameters under a name prefix with a shared RNG and policy.
pub struct ParamBuilder<'a, R: Rng> {
    pub set: &'a mut ParamSet,
    pub rng: &'a mut R,
    pub init: Init,
    pub bias: bool,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(set: &'a mut ParamSet, rng: &'a mut R) -> Self {
        Self {
            set,
            rng,
            init: Init::default(),
            bias: true,
        }
    }

    pub fn weight(&mut self, name: &str, shape: Shape) -> ParamId {
        let value = match self.init {
            Init::TruncNormal { std } => Tensor::trunc_normal(shape, std, self.rng),
            Init::Uniform { scale } => Tensor::uniform(shape, -scale, scale, self.rng),
        };
        self.set.push(name, ParamRole::Weight, value)
    }

    /// A `[1, c, 1, 1]` bias, or `None` when biases are disabled.
    pub fn bias(&mut self, name: &str, c: usize) -> Option<ParamId> {
        if !self.bias {
            return None;
        }
        let value = match self.init {
            Init::TruncNormal { .. } => Tensor::zeros([1, c, 1, 1]),
            Init::Uniform { scale } => Tensor::uniform([1, c, 1, 1], -scale, scale, self.rng),
        };
        Some(self.set.push(name, ParamRole::Bias, value))
    }

    /// LayerNorm `(gamma, beta)`.
    pub fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let (gamma, beta) = match self.init {
            Init::TruncNormal { .. } => (Tensor::ones([1, c, 1, 1]), Tensor::zeros([1, c, 1, 1])),
            Init::Uniform { scale } => (
                Tensor::uniform([1, c, 1, 1], 1.0 - scale, 1.0 + scale, self.rng),
                Tensor::uniform([1, c, 1, 1], -scale, scale, self.rng),
            ),
        };
        (
            self.set
                .push(format!("{name}.gamma"), ParamRole::NormAffine, gamma),
            self.set.push(format!("{name}.beta"), ParamRole::NormAffine, beta),
        )
    }

    pub fn layer_scale(&mut self, name: &str, c: usize, init: f64) -> ParamId {
        let value = match self.init {
            Init::TruncNormal { .. } => Tensor::full([1, c, 1, 1], init),
            Init::Uniform { scale } => Tensor::uniform([1, c, 1, 1], 0.5, 0.5 + scale, self.rng),
        };
        self.set.push(name, ParamRole::LayerScale, value)
    }
}
