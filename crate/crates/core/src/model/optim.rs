//! AdamW with a linear warmup/decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tape::{Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moments for a list of matrices, with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[Mat]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|p| Mat::zeros(p.raw_dim())).collect(),
            v: shapes.iter().map(|p| Mat::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn for_store(config: AdamWConfig, store: &ParamStore) -> Self {
        Self::new(config, &store.zeros_like())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params[i]` by `grads[i]`. `decay[i]` selects which
    /// matrices receive weight decay.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Mat], decay: &[bool], lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *p);
                });
        }
    }

    /// Updates every parameter in the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        let decay: Vec<bool> = store.ids().map(|id| store.decays(id)).collect();
        let mut refs: Vec<&mut Mat> = store.values_mut().iter_mut().collect();
        self.update(&mut refs, grads, &decay, lr);
    }
}

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step.saturating_sub(self.warmup_steps);
        self.peak_lr * (1.0 - done as f64 / span as f64).max(0.0)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
