use std::ops::Index;

use super::{Real, Tape, Tensor, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every tensor of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.trainable());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape; trainable tensors become
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect::<Result<_>>().map(Bound)
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.shape().to_vec(), t.values().to_vec()))
            .collect::<Result<_>>()
            .map(Bound)
    }

    /// Adds the tape's gradients into each trainable tensor. Tensors the
    /// backward pass never reached receive zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        ensure!(
            bound.0.len() == self.tensors.len(),
            "collect_grads: {} handles for {} tensors",
            bound.0.len(),
            self.tensors.len()
        );
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if !t.requires_grad() {
                continue;
            }
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); t.len()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
