use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub prunable: bool,
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; 2-D tensors (projections and embeddings) are prunable.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let prunable = tensor.rank() == 2;
        self.params.insert(name, Param { tensor, prunable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params.get(name).map(|p| &p.tensor).ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params.get_mut(name).map(|p| &mut p.tensor).ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn prunable(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.iter().filter(|(_, p)| p.prunable).map(|(n, p)| (n, &p.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_nonzero(&self) -> usize {
        self.params.values().map(|p| p.tensor.data.iter().filter(|&&v| v != 0.0).count()).sum()
    }
}
