use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter registry. Insertion order is stable and defines the
/// iteration order everywhere (optimizer, serialization, grad checks).
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
            return invalid(format!("duplicate parameter name {name}"));
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

    /// Weight matrix drawn from `uniform(-1/sqrt(fan), 1/sqrt(fan))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: &ParamSnapshot) -> Result<Self> {
        let mut store = Self::new();
        for p in &snapshot.params {
            store.add(
                p.name.clone(),
                Tensor::new(p.shape.clone(), p.values.clone())?,
            )?;
        }
        Ok(store)
    }
}

/// Serialized parameter map: name, shape and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub params: Vec<NamedTensor>,
}
