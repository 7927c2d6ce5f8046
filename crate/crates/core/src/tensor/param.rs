//! Named parameter storage. Keys are hierarchical dotted names; iteration is
//! always in sorted key order so updates and serialization are deterministic.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Gradients keyed by parameter name, as returned by `Tape::backward`.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Named float parameter arrays for all networks (encoder, decoder, prior,
/// posterior, heads). Checkpointable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Cast every entry (f32 <-> f64), e.g. to run gradient checks in f64.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| U::from_f64(x.to_f64()))))
                .collect(),
        }
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore {
            entries: iter.into_iter().map(|(k, v)| (k, v.with_grad())).collect(),
        }
    }
}
