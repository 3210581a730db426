//! ADAM with a polynomially annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn default_base_lr() -> f64 {
    2e-4
}
fn default_power() -> f64 {
    1.0
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Explicit step budget; when absent it is `⌈epochs × samples / batch_size⌉`.
    #[serde(default)]
    pub total_steps: Option<usize>,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            base_lr: default_base_lr(),
            total_steps: None,
            power: default_power(),
            batch_size: default_batch(),
            epochs: default_epochs(),
        }
    }
}

/// `base_lr · (1 − t/total)^power`, clamped to 0 past the end.
pub fn poly_lr(base_lr: f64, power: f64, t: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || t >= total_steps {
        return 0.0;
    }
    base_lr * (1.0 - t as f64 / total_steps as f64).powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Parameter each moment slot belongs to.
    pub ids: Vec<ParamId>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments for every trainable parameter, β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros: Vec<Tensor> = ids.iter().map(|id| Tensor::zeros(store.tensor(*id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            ids,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of every trainable parameter. Each gradient
    /// is multiplied by `grad_scale` first (1.0 unless clipping).
    pub fn step<'g>(
        &mut self,
        store: &mut ParamStore,
        grad_of: impl Fn(ParamId) -> Option<&'g Tensor>,
        lr: f64,
        grad_scale: f64,
    ) -> Result<()> {
        let mut grads = Vec::with_capacity(self.ids.len());
        for &id in &self.ids {
            let g = grad_of(id).ok_or_else(|| {
                Error::usage(format!("adam: no gradient for trainable parameter {}", store.name(id)))
            })?;
            if g.shape() != store.tensor(id).shape() {
                return Err(Error::dim(format!("adam: gradient shape mismatch for {}", store.name(id))));
            }
            grads.push(g);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (&id, g)) in self.ids.iter().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
