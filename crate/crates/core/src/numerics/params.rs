use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{GemError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(GemError::Config(format!("duplicate parameter name {name}")));
        }
        if !value.all_finite() {
            return Err(GemError::NonFinite(format!("initial value of {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Normal(0, std) initialised parameter.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![v; n])?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites values of every parameter whose name starts with `prefix` from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| GemError::Incompatible(format!("source lacks parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(GemError::Incompatible(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    p.name,
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}
