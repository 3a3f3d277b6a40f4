//! Named parameter storage and binding into the autograd graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Grads, Var};
use crate::tensor::Tensor;

/// Weight initialisation for convolution and linear kernels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean normal with a fixed standard deviation.
    Normal { std: f64 },
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`.
    HeNormal,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Normal { std: 0.02 }
    }
}

impl InitScheme {
    pub fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let std = match *self {
            InitScheme::Normal { std } => std,
            InitScheme::HeNormal => (2.0 / fan_in.max(1) as f64).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("finite positive std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Wraps every tensor in a graph leaf. With `trainable == false` the
    /// leaves are constants and the graph records nothing.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        Var::leaf(t.clone())
                    } else {
                        Var::constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Parameters of one [`ParamSet`] as graph leaves.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, idx: usize) -> &Var {
        &self.0[idx]
    }

    /// Gradients in slot order; zeros for unused slots.
    pub fn grads(&self, grads: &Grads) -> Vec<Tensor> {
        self.0.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}
