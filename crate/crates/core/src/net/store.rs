use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ordered `name → tensor` map holding weights, biases, batch-norm affine
/// parameters and batch-norm running statistics.
///
/// Running statistics (`*.running_mean`, `*.running_var`) are buffers: they
/// are saved with the parameters but never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T: Element = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::ParameterMismatch(format!("duplicate tensor `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ParameterMismatch(format!("missing tensor `{name}`")))
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::ParameterMismatch(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(name, _)| !is_buffer(name))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Bitwise equality of every tensor, including names and order.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
