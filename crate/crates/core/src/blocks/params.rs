use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Role of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (norm gains, biases, embeddings).
    NoDecay,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors of a model in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("parameter `{name}` declared twice")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::config(format!("no parameter named `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count of all trainable tensors.
    pub fn param_count(&self) -> u64 {
        self.count(|k| k != ParamKind::Buffer)
    }

    /// Element count of all buffers.
    pub fn buffer_count(&self) -> u64 {
        self.count(|k| k == ParamKind::Buffer)
    }

    fn count(&self, keep: impl Fn(ParamKind) -> bool) -> u64 {
        self.entries.iter().filter(|e| keep(e.kind)).map(|e| e.value.len() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value from `(name, tensor)` pairs. The set of names and
    /// every shape must match exactly.
    pub fn load(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, value) in tensors {
            let slot = self.get_mut(&name)?;
            if slot.shape() != value.shape() {
                return Err(Error::config(format!(
                    "`{name}`: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Seeded initializer that declares tensors into a store.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Normal(0, 0.02) truncated to ±2σ; used for linear and 1×1 maps.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<()> {
        let std = 0.02f32;
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        });
        self.store.insert(name, t, kind)
    }

    /// Normal(0, √(2 / fan_out)) with `fan_out = kh·kw·cout / groups`; used for
    /// spatial convolutions `[cout, cin/groups, kh, kw]`.
    pub fn fan_out_normal(&mut self, name: &str, shape: &[usize], groups: usize) -> Result<()> {
        let fan_out = shape[0] * shape[2] * shape[3] / groups;
        let normal = Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.store.insert(name, t, ParamKind::Weight)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f32, kind: ParamKind) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value), kind)
    }
}
