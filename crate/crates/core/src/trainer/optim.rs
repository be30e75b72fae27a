//! Adam with global-norm clipping and a warmup/cosine schedule.

use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            lr_floor: 0.1,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<F: Scalar>(params: &Params<F>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips `grads` to `clip_norm` and applies one update. Returns the
    /// pre-clip gradient norm.
    pub fn step<F: Scalar>(&mut self, params: &mut Params<F>, grads: &[Vec<f64>], cfg: &OptimConfig, lr: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, w) in tensor.data.iter_mut().enumerate() {
                let gk = g[k] * scale;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                let wf = w.to_f64().unwrap_or(f64::NAN);
                *w = F::of(wf - lr * (update + cfg.weight_decay * wf));
            }
        }
        norm
    }
}
