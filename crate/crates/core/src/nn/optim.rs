//! SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Optimizer state for one parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Apply one update in place. `location` names the parameters in errors.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], location: &str) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::structure(format!(
                "{location}: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::non_finite(format!("gradient of {location}")));
        }
        let lr = T::of(self.config.lr);
        let wd = T::of(self.config.weight_decay);
        let mu = T::of(self.config.momentum);
        let use_momentum = self.config.momentum > 0.0;
        if use_momentum && self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().clone())).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::structure(format!("{location}: gradient shape mismatch")));
            }
            if use_momentum {
                let v = &mut self.velocity[i];
                for ((w, &d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *m = mu * *m + d + wd * *w;
                    *w = *w - lr * *m;
                }
            } else {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * (d + wd * *w);
                }
            }
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::non_finite(location.to_string()));
        }
        Ok(())
    }
}
