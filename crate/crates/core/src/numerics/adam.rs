use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| vec![0.0; store.value(id).numel()])
            .collect();
        AdamState {
            config,
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every managed parameter from its current gradient.
    /// Fails without modifying anything if a gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(Error::MissingGradient(store.get(id).name.clone()));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, &id) in self.params.iter().enumerate() {
            let param = store.get_mut(id);
            let grad = param.grad.as_ref().expect("checked above").data();
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            let value = param.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                value[j] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * value[j]);
            }
        }
        Ok(())
    }
}
