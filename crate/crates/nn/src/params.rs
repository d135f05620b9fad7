//! Named parameter storage shared across forward passes.

use crate::{randn_tensor, Scalar, Tensor};
use ndarray::IxDyn;
use rand::Rng;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat list of named tensors. Order is creation order and is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_elems(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace a value, keeping the name. Shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "param shape changed");
        self.values[id.0] = value;
    }
}

/// Kaiming-style normal init: std = gain / sqrt(fan_in).
pub fn kaiming<F: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<F> {
    let std = F::c(gain / (fan_in as f64).sqrt());
    randn_tensor::<F, R>(shape, rng) * std
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::from_elem(IxDyn(shape), F::one())
}
