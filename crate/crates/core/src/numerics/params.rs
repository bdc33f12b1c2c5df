use std::collections::HashMap;
use std::ops::Index;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }

    /// Gradient buffers aligned with the store (zeros for unused params).
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::config(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .index
                .get(name)
                .ok_or_else(|| Error::config(format!("unknown tensor {name}")))?;
            if self.values[*id].shape() != t.shape() {
                return Err(Error::config(format!(
                    "tensor {name}: shape {:?} vs expected {:?}",
                    t.shape(),
                    self.values[*id].shape()
                )));
            }
            self.values[*id] = t.clone();
        }
        Ok(())
    }
}
