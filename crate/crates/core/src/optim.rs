//! AdamW: Adam with decoupled weight decay and bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to every parameter. Gradients are read, not
    /// cleared. Fails if a parameter has no gradient buffer or if the update
    /// produces a non-finite value.
    pub fn step(&self, params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
        if state.first.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state tracks {} parameters, store has {}",
                state.first.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::contract(format!("parameter `{name}` has no gradient")));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - math::powi(self.beta1, t);
        let bc2 = 1.0 - math::powi(self.beta2, t);
        for (i, (_, p)) in params.entries_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let m = &mut state.first[i];
            let v = &mut state.second[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                *w -= self.lr * self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        params.check_finite()
    }
}
