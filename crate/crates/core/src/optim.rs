//! Adam with bias correction and linear warmup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of `total_steps` over which the learning rate ramps up from 0.
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_fraction: 0.1,
            total_steps: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<Real>>,
    second_moment: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<Real>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate used for the `step`-th update (1-based).
    pub fn effective_lr(&self, step: u64) -> f64 {
        let warmup = self.config.warmup_fraction * self.config.total_steps as f64;
        if warmup <= 0.0 {
            return self.config.learning_rate;
        }
        self.config.learning_rate * (step as f64 / warmup).min(1.0)
    }

    /// Applies one update. Parameters without a gradient entry are left untouched.
    ///
    /// The whole step is rejected, with nothing modified, if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), OptimError> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.effective_lr(self.step_count);
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as Real, c.beta2 as Real);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] as f64 / bias1;
                let v_hat = v[i] as f64 / bias2;
                p[i] -= (lr * m_hat / (v_hat.sqrt() + c.epsilon)) as Real;
            }
        }
        Ok(())
    }
}
