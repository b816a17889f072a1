use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of parameter tensors.
///
/// Insertion order is preserved and used for every iteration, so anything
/// derived from a store (optimizer updates, checkpoints) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    /// Replaces the values of an existing parameter, keeping its trainable flag.
    pub fn assign(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(NumError::Shape(format!(
                "assigning {:?} into parameter {} of shape {:?}",
                tensor.shape(),
                self.names[id.0],
                slot.shape()
            )));
        }
        let flag = slot.requires_grad();
        *slot = tensor.with_requires_grad(flag);
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].set_requires_grad(flag);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, _, t)| t.requires_grad()).map(|(id, _, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds a gradient map produced by [`crate::Tape::backward`].
    pub fn accumulate(&mut self, grads: &crate::tape::Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies out the values of the given parameters.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<(ParamId, Vec<f64>)> {
        ids.iter().map(|&id| (id, self.get(id).data().to_vec())).collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Vec<f64>)]) {
        for (id, data) in snapshot {
            self.tensors[id.0].data_mut().copy_from_slice(data);
        }
    }
}
