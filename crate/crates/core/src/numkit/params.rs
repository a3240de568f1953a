use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{Real, Tensor};
use super::NumError;

/// Named parameter tensors. Iteration order is by name, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, va), (kb, vb))| ka == kb && va == vb)
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn get_shared(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.tensors.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// True when both stores hold the very same allocation for `name`.
    pub fn shares(&self, other: &Self, name: &str) -> bool {
        match (self.tensors.get(name), other.tensors.get(name)) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>()))).collect() }
    }

    /// Copies (shares) every tensor of `other` into this store.
    pub fn extend_from(&mut self, other: &Self) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), Arc::clone(v));
        }
    }

    pub fn check_shape(&self, name: &str, shape: &[usize]) -> Result<(), NumError> {
        let t = self.get(name).ok_or_else(|| NumError::MissingParam(name.to_string()))?;
        if t.shape() != shape {
            return Err(NumError::shape("params", format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(())
    }
}
