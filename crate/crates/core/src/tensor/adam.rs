//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the step counter, matching one
/// [`ParamSet`] tensor-for-tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let m = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let v = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(OptimizerState { config, m, v, step: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated on `params`, then
    /// clear them. Errors (missing or non-finite gradients, shape drift)
    /// leave both parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.tensors().len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameter set".into()));
        }
        for (idx, t) in params.tensors().iter().enumerate() {
            let grad = t.grad().ok_or_else(|| {
                Error::Config(format!("parameter tensor {idx} has no gradient"))
            })?;
            if grad.len() != self.m[idx].len() {
                return Err(Error::Shape(format!("gradient length changed for tensor {idx}")));
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient for tensor {idx}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (idx, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                data[i] -= (learning_rate * m_hat / (v_hat.sqrt() + epsilon)) as f32;
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
