//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 5,
            total_epochs: 100,
            seed: 0,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::contract("warmup cannot exceed total epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup from zero, then a cosine decay to zero at `total_epochs`.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch >= cfg.total_epochs {
        return 0.0;
    }
    if epoch < cfg.warmup_epochs {
        return cfg.lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let span = (cfg.total_epochs - cfg.warmup_epochs) as f64;
    let progress = (epoch - cfg.warmup_epochs) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment state per parameter, keyed by name.
pub struct AdamW<S> {
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
    pub step_count: u64,
}

impl<S: Scalar> Default for AdamW<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        AdamW { moments: BTreeMap::new(), step_count: 0 }
    }

    /// One update over every trainable parameter. Weight decay multiplies
    /// the weights directly and never enters the moment estimates.
    pub fn step(&mut self, params: &ParamSet<S>, lr: f64, cfg: &OptimConfig) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = S::from_f64_c(lr);
        let wd = S::from_f64_c(cfg.weight_decay);
        let b1 = S::from_f64_c(cfg.beta1);
        let b2 = S::from_f64_c(cfg.beta2);
        let eps = S::from_f64_c(cfg.eps);
        let one = S::one();
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);

        for (name, p) in params.iter() {
            let mut pb = p.borrow_mut();
            if !pb.trainable {
                continue;
            }
            if pb.grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for parameter '{name}'")));
            }
            let n = pb.data.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let decay = one - lr * wd;
            for i in 0..n {
                let g = pb.grad[i];
                pb.data[i] *= decay;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                pb.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<S>, Vec<S>)> {
        &self.moments
    }

    pub fn restore(&mut self, step_count: u64, moments: BTreeMap<String, (Vec<S>, Vec<S>)>) {
        self.step_count = step_count;
        self.moments = moments;
    }
}
