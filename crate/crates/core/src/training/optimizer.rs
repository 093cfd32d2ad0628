use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter from its gradient, then zeroes all
    /// gradients. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            if let Some(pos) = store.grad(id).data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at index {pos}",
                    store.get(id).name()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let grad = store.grad(id).clone();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let w = store.value_mut(id);
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let mi = &mut m.data_mut()[i];
                let vi = &mut v.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let wi = &mut w.data_mut()[i];
                *wi -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *wi);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
