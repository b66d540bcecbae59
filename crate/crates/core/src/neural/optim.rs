use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParameterStore, ScheduleMeta};
use super::tensor::Tensor;
use super::NeuralError;

/// Adam hyperparameters and the decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps held at `base_lr` before inverse-square-root decay begins.
    pub warmup: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamConfig {
    /// `base_lr * min(1, sqrt(warmup / step))` for a 1-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup.max(1) as f64;
        self.base_lr * (warmup / step).sqrt().min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn schedule(&self) -> ScheduleMeta {
        ScheduleMeta {
            base_lr: self.config.base_lr,
            warmup: self.config.warmup,
            step: self.step,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// One Adam update. Parameters without an entry in `grads` are treated
    /// as having a zero gradient.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<(), NeuralError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NeuralError::MissingParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NeuralError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NanGradient(name.clone()));
            }
        }

        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let lr = self.config.lr_at(self.step);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);

        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let grad = grads.get(&name);
            let p = params.get_mut(&name).expect("name from store");
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.data_mut();
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g.data()[i] * scale);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
