//! AdamW: Adam with decoupled weight decay.

use crate::nets::ParamVector;
use serde::{Deserialize, Serialize};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Exponential learning-rate anneal: after this many steps the
    /// effective rate has halved (and keeps halving). 0 disables.
    pub lr_half_life: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            lr_half_life: 0,
        }
    }
}

/// AdamW state for one parameter vector. The decay is decoupled: parameters
/// shrink by lr·wd·θ before the moment-based update is applied.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_len: usize) -> Self {
        Self { cfg, m: vec![0.0; param_len], v: vec![0.0; param_len], step: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// How many updates have been applied.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Panics if `grad` length differs from the
    /// length the optimizer was built for.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed under optimizer");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let c = &self.cfg;
        let lr = if c.lr_half_life > 0 {
            c.lr * 0.5_f64.powf((self.step - 1) as f64 / c.lr_half_life as f64)
        } else {
            c.lr
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let p = params.as_mut_slice();
        let g = grad.as_slice();
        for i in 0..p.len() {
            p[i] -= lr * c.weight_decay * p[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}
