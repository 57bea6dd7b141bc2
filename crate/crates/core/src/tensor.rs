//! Dense row-major tensors and the named parameter store.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Grads;
use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// A tensor that `requires_grad` may carry a gradient buffer of the same
/// shape. The buffer is only ever touched by [`ParamStore::accumulate`] and
/// [`ParamStore::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} must be non-empty with positive sizes"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Rows `[start, start + len)` along the leading dimension.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let lead = self.shape[0];
        if len == 0 || start + len > lead {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside leading dim {lead}", start + len),
            ));
        }
        let stride = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(&shape, self.data[start * stride..(start + len) * stride].to_vec())
    }
}

/// Ordered collection of named trainable tensors.
///
/// Iteration order is insertion order, so two stores built by the same code
/// path enumerate parameters identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries
            .push((name.to_string(), tensor.with_requires_grad(true)));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            match &mut t.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => t.grad = Some(vec![0.0; t.data.len()]),
            }
        }
    }

    /// Adds `grads` into the gradient buffers, creating them where absent.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        if grads.len() > self.entries.len() {
            return Err(Error::contract(format!(
                "gradient set covers {} parameters, store has {}",
                grads.len(),
                self.entries.len()
            )));
        }
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            if let Some(g) = grads.get(i) {
                let buf = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
        Ok(())
    }

    /// Copies values from `other`, which must hold the same names and shapes
    /// in the same order. The error names the first offending parameter.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, (name, t)) in self.entries.iter().enumerate() {
            match other.entries.get(i) {
                Some((n, o)) if n == name && o.shape == t.shape => {}
                Some((n, o)) if n == name => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        o.shape, t.shape
                    )))
                }
                _ => {
                    return Err(Error::config(format!(
                        "parameter `{name}` missing or out of order"
                    )))
                }
            }
        }
        if other.entries.len() != self.entries.len() {
            let extra = &other.entries[self.entries.len()].0;
            return Err(Error::config(format!("unexpected parameter `{extra}`")));
        }
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            t.data.copy_from_slice(&o.data);
        }
        Ok(())
    }

    /// Fails on the first parameter holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}
