use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{mismatch, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Insertion order is the serialisation
/// order and the order gradients are reported in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a tensor. Panics on duplicate names; parameter layouts are
    /// fixed by model code, so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other.tensors[other.id(name)?.0].clone();
            if src.shape != t.shape {
                return Err(mismatch("load_from", &t.shape, &src.shape));
            }
            *t = src;
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Grads {
        Grads { tensors: store.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect() }
    }

    /// Missing entries become zeros.
    pub(crate) fn from_parts(store: &ParamStore, parts: Vec<Option<Vec<f64>>>) -> Grads {
        let tensors = store
            .tensors
            .iter()
            .zip(parts)
            .map(|(t, g)| match g {
                Some(data) => Tensor { shape: t.shape.clone(), data },
                None => Tensor::zeros(&t.shape),
            })
            .collect();
        Grads { tensors }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
