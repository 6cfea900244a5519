use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::rng::RngStream;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub requires_grad: bool,
    /// AdamW first and second moments, created on the first optimizer step.
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    /// Insert a trainable parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name,
            Parameter {
                value,
                requires_grad: true,
                moments: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("ParameterStore::set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Mark every parameter matching `frozen` as not requiring gradients, and every other one as trainable.
    pub fn set_frozen(&mut self, frozen: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.requires_grad = !frozen(name);
        }
    }

    /// Fresh stream for initializing parameter `name`.
    pub fn init_rng(&self, name: &str) -> RngStream {
        RngStream::new(self.rng_seed, format!("init/{name}"))
    }
}
