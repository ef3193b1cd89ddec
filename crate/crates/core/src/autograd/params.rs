use std::collections::HashMap;

use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Rows pinned to their current value: gradients there are discarded
    /// and the optimizer never touches them.
    pub frozen_rows: Vec<usize>,
}

/// Named learnable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), value, grad: None, frozen_rows: Vec::new() });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Zeroes `row` and excludes it from learning.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        let p = &mut self.params[id.0];
        let (_, cols) = p.value.dims2();
        p.value.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
        if !p.frozen_rows.contains(&row) {
            p.frozen_rows.push(row);
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Resets every gradient to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, b) in grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        let (_, cols) = p.value.dims2();
        for &r in &p.frozen_rows {
            grad.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
    }

    pub fn grad(&self, id: ParamId) -> Result<&Tensor, TensorError> {
        let p = &self.params[id.0];
        p.grad.as_ref().ok_or_else(|| TensorError::MissingGradient(p.name.clone()))
    }

    /// Rounds all values through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }
}
