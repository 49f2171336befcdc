//! Bias-corrected Adam over a [`ParameterStore`].

use std::collections::BTreeMap;

use super::ParameterStore;
use crate::error::{Result, VqcdError};

pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    slots: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable tensor. Gradients must be populated;
    /// they are cleared afterwards. A zero gradient with zero moments leaves
    /// the parameter bit-identical.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in store.iter_trainable_mut() {
            let n = tensor.numel();
            let grad = tensor
                .grad()
                .ok_or_else(|| {
                    VqcdError::invariant(format!("missing gradient on trainable tensor `{name}`"))
                })?
                .to_vec();
            let (m, v) = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let update = self.lr * mhat / (vhat.sqrt() + self.eps);
                if update != 0.0 {
                    data[i] -= update;
                }
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}
