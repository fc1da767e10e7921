//! Named parameter tensors and per-task gradient maps.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Name fragments that exempt a tensor from weight decay.
pub const DECAY_EXEMPT_PATTERNS: [&str; 5] = [
    "bias",
    "norm-ff.weight",
    "norm-mha.weight",
    "norm-conv.weight",
    "norm-final.weight",
];

pub fn is_decay_exempt(name: &str) -> bool {
    DECAY_EXEMPT_PATTERNS.iter().any(|p| name.contains(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Mat,
    pub decay_exempt: bool,
}

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat, decay_exempt: bool) {
        self.tensors.insert(
            name.into(),
            Parameter {
                value,
                decay_exempt,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// How a parameter is drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Uniform in `±limit`.
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Materialize specs in order from one seeded stream.
pub fn materialize(specs: &[ParamSpec], seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::default();
    for spec in specs {
        let value = match spec.init {
            Init::FanIn(fan_in) => {
                let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
                Array2::from_shape_fn(spec.shape, |_| rng.random_range(-limit..limit))
            }
            Init::Uniform(limit) => {
                Array2::from_shape_fn(spec.shape, |_| rng.random_range(-limit..limit))
            }
            Init::Ones => Array2::ones(spec.shape),
            Init::Zeros => Array2::zeros(spec.shape),
        };
        assert!(
            !set.contains(&spec.name),
            "duplicate parameter name {}",
            spec.name
        );
        set.insert(spec.name.clone(), value, is_decay_exempt(&spec.name));
    }
    set
}

/// Per-tensor gradients of one task. A missing key means a zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub task: String,
    pub grads: BTreeMap<String, Mat>,
}

impl GradientSet {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            grads: BTreeMap::new(),
        }
    }

    /// Adds `scale · g` into the tensor `name`.
    pub fn accumulate(&mut self, name: &str, g: &Mat, scale: f64) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.scaled_add(scale, g),
            None => {
                self.grads.insert(name.to_string(), g * scale);
            }
        }
    }

    pub fn merge(&mut self, other: &GradientSet, scale: f64) {
        for (name, g) in &other.grads {
            self.accumulate(name, g, scale);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Every key must name a tensor of the same shape in `params`.
    pub fn check_against(&self, params: &ParameterSet) -> Result<()> {
        for (name, g) in &self.grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.value.dim() != g.dim() {
                return Err(Error::ShapeMismatch {
                    what: format!("gradient for {name}"),
                    expected: p.value.dim(),
                    got: g.dim(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exemption_rules() {
        assert!(is_decay_exempt("content_enc.layers.0.ffn.w1.bias"));
        assert!(is_decay_exempt("x.norm-mha.weight"));
        assert!(is_decay_exempt("x.norm-final.weight"));
        assert!(!is_decay_exempt("x.ffn.w1.weight"));
        assert!(!is_decay_exempt("x.norm-src.weight"));
    }

    #[test]
    fn materialize_is_deterministic() {
        let specs = vec![
            ParamSpec::new("a.weight", (3, 4), Init::FanIn(3)),
            ParamSpec::new("a.bias", (1, 4), Init::Zeros),
        ];
        let a = materialize(&specs, 9);
        let b = materialize(&specs, 9);
        assert_eq!(a, b);
        assert_ne!(a, materialize(&specs, 10));
        assert!(a.get("a.bias").unwrap().decay_exempt);
        assert!(!a.get("a.weight").unwrap().decay_exempt);
    }
}
