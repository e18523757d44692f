use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor: tensor.with_grad(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Puts every tensor on the graph, in store order.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Vec<Var> {
        self.entries.iter().map(|e| g.param(&e.tensor)).collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Swaps in values from `other`, which must have the same names and
    /// shapes in the same order.
    pub fn replace_all(&mut self, other: ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            if !theirs.tensor.is_finite() {
                return Err(Error::NonFinite(format!("parameter {} holds NaN/Inf", theirs.name)));
            }
        }
        self.entries = other
            .entries
            .into_iter()
            .map(|mut e| {
                e.tensor.set_requires_grad(true);
                e
            })
            .collect();
        Ok(())
    }

    pub fn from_entries(entries: Vec<NamedTensor>) -> Self {
        Self { entries }
    }
}
