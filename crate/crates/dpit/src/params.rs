//! Named parameter registry. Model layers hold [`ParamId`]s into one store;
//! each training step binds every parameter onto a fresh tape and reads the
//! gradients back in store order, which keeps the optimizer state, checkpoint
//! layout and gradient sampling aligned with a single canonical ordering.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, ValueId};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name:?}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every parameter onto the tape, in store order. With
    /// `trainable`, the leaves collect gradients during backward.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<ValueId> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Reads gradients for every parameter after a backward pass, in store
    /// order. Errors if a bound parameter received no gradient.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &[ValueId]) -> Result<Vec<Vec<T>>> {
        self.entries
            .iter()
            .zip(bound)
            .map(|((name, tensor), &id)| {
                tape.grad(id).map(|g| g.to_vec()).ok_or_else(|| {
                    Error::numeric(format!(
                        "parameter {name} ({:?}) has no gradient",
                        tensor.shape()
                    ))
                })
            })
            .collect()
    }

    /// Re-instantiates the store under another element type, e.g. f32
    /// training weights lifted to f64 for gradient checking.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, tensor) in &self.entries {
            out.add(name.clone(), tensor.cast::<U>());
        }
        out
    }
}
