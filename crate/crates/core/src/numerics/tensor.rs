//! Dense row-major f64 tensors and the named parameter store.
//!
//! Tensors are plain values: shape, flat data, a trainable flag, and an
//! optional gradient buffer. A tensor with `requires_grad == false` never
//! has a gradient allocated, no matter how it is used in a graph.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::rng::Rng;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not hold {len} elements")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("cross-entropy: every position is masked out")]
    DegenerateBatch,
    #[error("cross-entropy: target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("{op}: index range {start}..{end} exceeds extent {extent}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter name `{0}`")]
    UnknownParam(String),
}

/// Dense n-dimensional array of f64 with row-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::BadShape {
                op: "from_vec",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal_scaled(std)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Flip the trainable flag. Clearing it also drops any gradient buffer,
    /// keeping the "frozen tensors never hold gradients" invariant.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulate into the gradient buffer. No-op on frozen tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Stable position in the store, usable as an array slot.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters. Names are dotted paths
/// (`encoder.layer2.attn.wq`) so adaptation strategies can gate whole
/// groups by prefix.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn id_of(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, on: bool) -> usize {
        let mut touched = 0;
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                tensor.set_requires_grad(on);
                touched += 1;
            }
        }
        touched
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.set_requires_grad(false);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn param_count_by_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Raw little-endian bytes of every parameter whose name matches the
    /// prefix, in store order. Used for frozen-group identity audits.
    pub fn bytes_by_prefix(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant_enforced() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadShape { .. }));
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let mut t = Tensor::zeros(vec![2, 2]);
        t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn clearing_trainable_drops_grad() {
        let mut t = Tensor::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn store_rejects_duplicates_and_finds_by_name() {
        let mut store = ParamStore::new();
        let id = store.add("a.w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.add("a.w", Tensor::zeros(vec![2])).is_err());
        assert_eq!(store.id_of("a.w").unwrap(), id);
        assert!(store.id_of("missing").is_err());
    }

    #[test]
    fn prefix_gating_and_counts() {
        let mut store = ParamStore::new();
        store.add("enc.w1", Tensor::zeros(vec![4])).unwrap();
        store.add("enc.w2", Tensor::zeros(vec![6])).unwrap();
        store.add("dec.w1", Tensor::zeros(vec![8])).unwrap();
        store.set_trainable_by_prefix("enc.", true);
        assert_eq!(store.trainable_param_count(), 10);
        assert_eq!(store.param_count_by_prefix("dec."), 8);
        assert_eq!(store.bytes_by_prefix("enc.").len(), 10 * 8);
    }
}
