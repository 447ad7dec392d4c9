use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};
use crate::{Error, Result};

/// Plain SGD with decoupled-form weight decay and a stepped learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.0,
            decay_factor: 0.9,
            decay_every: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate in force at `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as i32;
        self.learning_rate * self.decay_factor.powi(steps)
    }
}

/// `W ← (1 − μλ)·W − μ·∇W`, `b ← b − μ·∇b`, with `μ` the scheduled rate at `epoch`.
pub fn sgd_step(mlp: &mut Mlp, grads: &MlpGrads, config: &SgdConfig, epoch: usize) -> Result<()> {
    if grads.layers.len() != mlp.layers().len() {
        return Err(Error::config("gradient does not match MLP depth"));
    }
    for (layer, g) in mlp.layers().iter().zip(&grads.layers) {
        if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
            return Err(Error::config("gradient shape does not match parameters"));
        }
    }
    let mu = config.rate_at(epoch);
    let shrink = 1.0 - mu * config.weight_decay;
    for (layer, g) in mlp.layers_mut().iter_mut().zip(&grads.layers) {
        for (w, dw) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w = shrink * *w - mu * dw;
        }
        for (b, db) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= mu * db;
        }
    }
    Ok(())
}
