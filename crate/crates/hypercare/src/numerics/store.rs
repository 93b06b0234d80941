use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

/// Named parameter tensors plus a same-shaped gradient buffer per key.
///
/// Keys are kept in sorted order, which fixes the canonical coordinate
/// order used by [`flat_grads`](ParamStore::flat_grads) and the flat
/// vector round-trips.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        let key = key.into();
        let (r, c) = value.shape();
        self.grads.insert(key.clone(), Tensor::zeros(r, c));
        self.params.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor, NumericsError> {
        self.params
            .get(key)
            .ok_or_else(|| NumericsError::UnknownParam(key.to_string()))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor, NumericsError> {
        self.params
            .get_mut(key)
            .ok_or_else(|| NumericsError::UnknownParam(key.to_string()))
    }

    pub fn grad(&self, key: &str) -> Result<&Tensor, NumericsError> {
        self.grads
            .get(key)
            .ok_or_else(|| NumericsError::UnknownParam(key.to_string()))
    }

    pub fn set_grad(&mut self, key: &str, grad: Tensor) {
        self.grads.insert(key.to_string(), grad);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Keys in canonical (sorted) order.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_coords(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Gradients flattened in canonical key order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_coords());
        for key in self.params.keys() {
            out.extend_from_slice(self.grads[key].data());
        }
        out
    }

    /// Parameter values flattened in canonical key order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_coords());
        for t in self.params.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Writes a flat vector (canonical key order) into the gradient buffers.
    pub fn set_grads_from_flat(&mut self, flat: &[f64]) -> Result<(), NumericsError> {
        if flat.len() != self.num_coords() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_grads_from_flat",
                lhs: (flat.len(), 1),
                rhs: (self.num_coords(), 1),
            });
        }
        let mut offset = 0;
        for key in self.params.keys().cloned().collect::<Vec<_>>() {
            let g = self.grads.get_mut(&key).expect("grad buffer exists");
            let n = g.numel();
            g.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// In-place `theta += scale * delta` over the flat canonical order.
    pub fn add_scaled_flat(&mut self, delta: &[f64], scale: f64) -> Result<(), NumericsError> {
        if delta.len() != self.num_coords() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_scaled_flat",
                lhs: (delta.len(), 1),
                rhs: (self.num_coords(), 1),
            });
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.numel();
            for (v, d) in t.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *v += scale * d;
            }
            offset += n;
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    pub(crate) fn params_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}
