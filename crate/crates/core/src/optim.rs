//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Only weight matrices (names ending in `.w`) are decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, p)| Matrix::zeros(p.value.raw_dim())).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if decays(&params.get(id).name) { c.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let p = params.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
/// `step` counts from 0.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}
