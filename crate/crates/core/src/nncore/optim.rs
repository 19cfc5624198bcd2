use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Filled in by the trainer from epochs × batches when left at 0.
    pub total_steps: usize,
    pub decay_power: f64,
    pub end_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_steps: 0,
            decay_power: 1.0,
            end_lr: 0.0,
        }
    }
}

impl AdamConfig {
    /// Polynomial decay: `(lr0 − end_lr)·(1 − step/total)^power + end_lr`.
    pub fn lr(&self, step: usize) -> f64 {
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        (self.lr0 - self.end_lr) * (1.0 - frac).powf(self.decay_power) + self.end_lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("adam total_steps must be positive".into()));
        }
        if !(self.lr0 > 0.0) || self.end_lr < 0.0 || self.end_lr > self.lr0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= end_lr <= lr0, lr0 > 0 (got {} / {})",
                self.lr0, self.end_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("adam betas must be in [0,1) and epsilon > 0".into()));
        }
        if self.decay_power < 0.0 {
            return Err(Error::Config("decay_power must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter id.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            moments: BTreeMap::new(),
        })
    }

    /// One update at schedule position `step` (0-based). Frozen parameters
    /// and parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, step: usize) -> Result<()> {
        if step >= self.config.total_steps {
            return Err(Error::Usage(format!(
                "optimizer step {step} beyond schedule length {}",
                self.config.total_steps
            )));
        }
        let lr = self.config.lr(step);
        let t = (step + 1) as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for id in grads.param_ids().collect::<Vec<_>>() {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            if g.shape() != param.value.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("grad {:?} vs param {:?} ({})", g.shape(), param.value.shape(), param.name),
                ));
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            param.value.check_finite(&param.name)?;
        }
        Ok(())
    }
}
