use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named learnable arrays. Iteration order is the sorted name order, which
/// fixes the order of every reduction over parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds `grad` into the named entry.
    pub fn accumulate(&mut self, name: &str, grad: &[T]) {
        let t = self.get_mut(name);
        assert_eq!(t.len(), grad.len(), "gradient length for {name}");
        for (a, &g) in t.data_mut().iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn add_assign(&mut self, other: &ParameterSet<T>) {
        for (name, t) in &mut self.tensors {
            t.add_assign(other.get(name));
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            t.scale(s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes, and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes_vec());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible<U: Scalar>(&self, other: &ParameterSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter arrays, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.try_get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}
