//! Named trainable parameters and their binding into a [`Graph`](crate::Graph).

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// An ordered collection of named tensors. Order is stable and defines the
/// layout used by optimizers and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Copies every tensor from `named` into the parameter of the same name.
    /// Fails on a missing name or a shape mismatch.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            let src = lookup(name).ok_or_else(|| TensorError::MissingTensor(name.clone()))?;
            if src.shape() != tensor.shape() {
                return Err(TensorError::Shape(format!(
                    "parameter `{name}`: stored {:?}, expected {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            *tensor = src.clone();
        }
        Ok(())
    }
}

/// Graph variables for every parameter of one store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// One gradient per parameter (zeros where the loss does not depend on it).
    pub fn grads<T: Scalar>(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
