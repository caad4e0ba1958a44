//! Adam with a stepped learning-rate decay.

use crate::error::{NdError, Result};
use crate::params::ParamStore;

/// Hyper-parameters of [`AdamState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 1e-5,
            decay_factor: 0.9,
            decay_epochs: vec![5, 10, 20],
        }
    }
}

impl AdamConfig {
    /// `base_lr · decay_factor^k` where `k` counts decay epochs `<= epoch`.
    ///
    /// The product is rounded to 12 significant digits so that e.g. three
    /// decays of 1e-5 by 0.9 give exactly `7.29e-6` rather than
    /// `7.290000000000001e-6`.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        round_significant(self.base_lr * self.decay_factor.powi(k as i32), 12)
    }
}

fn round_significant(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits - 1, x).parse().unwrap_or(x)
}

/// Optimizer state: per-parameter first/second moments aligned with the
/// insertion order of the [`ParamStore`] it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f32>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            step_count: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.config.effective_lr(epoch)
    }

    /// Applies one bias-corrected Adam update to every trainable parameter that
    /// holds a gradient, then clears all gradients.
    ///
    /// Gradients are checked before anything is modified: a NaN or infinity
    /// aborts the step with an error naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, epoch: usize) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(NdError::Shape {
                op: "adam_step",
                detail: format!("state tracks {} parameters, store has {}", self.m.len(), store.len()),
            });
        }
        for p in store.iter().filter(|p| p.trainable) {
            if let Some(g) = p.tensor.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NdError::NonFiniteGradient {
                        param: p.name.clone(),
                        index,
                    });
                }
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let lr = self.effective_lr(epoch);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.epsilon as f32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (lr * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        store.zero_grads();
        Ok(())
    }
}
