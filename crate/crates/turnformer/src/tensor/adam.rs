//! Adam optimizer with bias correction and L2 weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
pub struct AdamState<E> {
    pub cfg: AdamConfig,
    t: u64,
    moments: HashMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Element> AdamState<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one named parameter in place. Weight decay is applied as an
    /// L2 term added to the gradient before the moment updates.
    pub fn update_param(
        &mut self,
        name: &str,
        value: &mut Tensor<E>,
        grad: &Tensor<E>,
    ) -> Result<()> {
        if grad.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                grad.shape(),
                name,
                value.shape()
            )));
        }
        let t = self.t.max(1);
        let lr = E::from_f64(self.cfg.lr);
        let beta1 = E::from_f64(self.cfg.beta1);
        let beta2 = E::from_f64(self.cfg.beta2);
        let one_m_beta1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_beta2 = E::from_f64(1.0 - self.cfg.beta2);
        let eps = E::from_f64(self.cfg.eps);
        let wd = E::from_f64(self.cfg.weight_decay);
        let inv_bc1 = E::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(t as i32)));
        let inv_bc2 = E::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(t as i32)));

        let n = value.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![E::zero(); n], vec![E::zero(); n]));
        let mut updated = value.data().to_vec();
        for i in 0..n {
            let g = grad.data()[i] + wd * updated[i];
            m[i] = beta1 * m[i] + one_m_beta1 * g;
            v[i] = beta2 * v[i] + one_m_beta2 * g * g;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            updated[i] = updated[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *value = Tensor::from_vec(value.rows(), value.cols(), updated)?;
        Ok(())
    }

    /// One optimizer step over named parameters. Parameters without a
    /// gradient entry are left untouched.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<E>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<E>)>,
    {
        self.begin_step();
        for (name, value) in params {
            if let Some(grad) = grads.get(name) {
                self.update_param(name, value, grad)?;
            }
        }
        Ok(())
    }
}
