//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length in steps; 0 keeps the learning rate constant.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0015,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 15_000,
        }
    }
}

/// Learning rate at 1-based `step`: linear ramp to `peak` over `warmup`
/// steps, then decay proportional to `step^-0.5`.
pub fn warmup_lr(peak: f64, warmup: usize, step: u64) -> f64 {
    if warmup == 0 {
        return peak;
    }
    let s = step.max(1) as f64;
    let w = warmup as f64;
    peak * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        warmup_lr(self.cfg.lr, self.cfg.warmup_steps, self.step.max(1))
    }

    /// Applies one update from the gradients in `store`, then clears them.
    /// Fails without touching anything if a parameter has no gradient.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<f64> {
        if let Some(id) = store.ids().find(|&id| store.grad(id).is_none()) {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        }
        self.step += 1;
        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup_steps, self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.take_grad(id).expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let value = &mut store.values_mut()[id.index()];
            let mut data = value.clone().into_vec();
            for i in 0..data.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            *value = crate::tensor::Tensor::from_parts(value.shape().to_vec(), data);
        }
        Ok(lr)
    }
}
