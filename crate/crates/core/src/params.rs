use std::collections::BTreeMap;

use crate::autodiff::{Graph, Gradients, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed (lexicographic) order.
///
/// The ordering is what lets the server line up parameters, deltas and
/// optimizer moments coming from different clients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero tensors with this model's names and shapes.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has identical names and shapes.
    pub fn check_aligned(&self, other: &ModelParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("params", &[self.tensors.len()], &[other.tensors.len()]));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::UnknownParam(kb.clone()));
            }
            if va.shape() != vb.shape() {
                return Err(Error::shape("params", va.shape(), vb.shape()));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, parameter by parameter.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Adds every tensor to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = BTreeMap::new();
        for (name, value) in &self.tensors {
            nodes.insert(name.clone(), graph.leaf(value.clone())?);
        }
        Ok(ParamNodes { nodes })
    }

    /// Adds every tensor to `graph` as a constant (no gradient).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = BTreeMap::new();
        for (name, value) in &self.tensors {
            nodes.insert(name.clone(), graph.constant(value.clone())?);
        }
        Ok(ParamNodes { nodes })
    }

    /// Keeps only parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merges `other` into `self`, overwriting equal names.
    pub fn extend(&mut self, other: ModelParams) {
        self.tensors.extend(other.tensors);
    }
}

/// Graph node handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Collects per-parameter gradients in the same layout as the params.
    pub fn gradients(&self, grads: &mut Gradients) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, &id) in &self.nodes {
            out.insert(name.clone(), grads.take(id));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}
