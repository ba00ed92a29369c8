use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;

/// A named trainable tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Populated by [`ParamStore::set_grads`] after a backward pass.
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            requires_grad: true,
            grad: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(move |id| &mut self.params[id])
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, name: &str, flag: bool) -> Result<()> {
        let id = self.expect_id(name)?;
        self.params[id].requires_grad = flag;
        Ok(())
    }

    /// Store accumulated gradients on their parameters.
    pub fn set_grads(&mut self, grads: &GradBuffer) {
        for (param, g) in self.params.iter_mut().zip(&grads.slots) {
            param.grad = match g {
                Some(values) if param.requires_grad => Some(
                    Tensor::new(param.value.shape().to_vec(), values.clone())
                        .expect("gradient shape tracks parameter shape"),
                ),
                _ => None,
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Per-parameter gradient accumulator, indexed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn add(&mut self, id: ParamId, values: &[f64]) {
        if id >= self.slots.len() {
            self.slots.resize(id + 1, None);
        }
        match &mut self.slots[id] {
            Some(acc) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(values.to_vec()),
        }
    }

    /// Add `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (id, slot) in other.slots.iter().enumerate() {
            if let Some(values) = slot {
                self.add(id, values);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    pub fn scale(&mut self, factor: f64) {
        for values in self.slots.iter_mut().flatten() {
            values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }
}
