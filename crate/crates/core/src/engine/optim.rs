//! Bias-corrected Adam with per-parameter freezing.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state bound to one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    store: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            store: store.store_id(),
            moments: store
                .params()
                .map(|p| Moments {
                    first: vec![0.0; p.value().len()],
                    second: vec![0.0; p.value().len()],
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.moments[index].first
    }

    /// One update of every unfrozen parameter. Frozen parameters and their
    /// moments are left untouched. Fails before mutating anything if an
    /// unfrozen parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.store_id() != self.store || store.len() != self.moments.len() {
            return Err(Error::InvalidArgument("optimizer bound to a different parameter store".into()));
        }
        if let Some(p) = store.params().find(|p| !p.is_frozen() && p.grad().is_none()) {
            return Err(Error::MissingGradient(p.name().to_string()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (p, mom) in store.params_mut().zip(&mut self.moments) {
            if p.is_frozen() {
                continue;
            }
            let grad = p.grad().expect("checked above").data().to_vec();
            let value = p.value_mut().data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                mom.first[i] = beta1 * mom.first[i] + (1.0 - beta1) * g;
                mom.second[i] = beta2 * mom.second[i] + (1.0 - beta2) * g * g;
                let m_hat = mom.first[i] / c1;
                let v_hat = mom.second[i] / c2;
                value[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
