//! SGD with (Nesterov) momentum and decoupled-from-data weight decay.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Applied to every trainable parameter, BN affine parameters included.
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, dataset_len: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > dataset_len {
            return Err(Error::Invalid(format!(
                "batch_size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient, then zeroes all gradients.
    ///
    /// Non-finite gradients abort the step before anything is written;
    /// the gradients are zeroed and a divergence error is returned.
    pub fn step(&mut self, store: &mut ParamStore, config: &OptimizerConfig, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.velocity.len(),
                store.len()
            )));
        }
        let bad = store
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.all_finite())
            .map(|(_, p)| p.name.clone());
        if let Some(name) = bad {
            store.zero_grads();
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
        let (mu, wd) = (config.momentum, config.weight_decay);
        // Compute every update first so an overflow leaves nothing applied.
        let mut staged = Vec::with_capacity(store.len());
        let mut overflow = None;
        for ((_, p), v) in store.iter().zip(&self.velocity) {
            if !p.trainable {
                staged.push(None);
                continue;
            }
            let mut w = p.value.data().to_vec();
            let mut vel = v.data().to_vec();
            for ((wi, &gi), vi) in w.iter_mut().zip(p.grad.data()).zip(&mut vel) {
                let g = gi + wd * *wi;
                *vi = mu * *vi - lr * g;
                if config.nesterov {
                    *wi += mu * *vi - lr * g;
                } else {
                    *wi += *vi;
                }
            }
            if !w.iter().chain(&vel).all(|x| x.is_finite()) {
                overflow = Some(p.name.clone());
                break;
            }
            staged.push(Some((w, vel)));
        }
        if let Some(name) = overflow {
            store.zero_grads();
            return Err(Error::Diverged(format!("update of {name} overflowed")));
        }
        for ((p, v), update) in store.iter_mut().zip(&mut self.velocity).zip(staged) {
            if let Some((w, vel)) = update {
                p.value.data_mut().copy_from_slice(&w);
                v.data_mut().copy_from_slice(&vel);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
