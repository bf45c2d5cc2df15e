//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use super::params::Params;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Option<Array2<f64>>>,
    #[serde(skip)]
    pub v: Vec<Option<Array2<f64>>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    /// One update at learning rate `lr`. Missing gradients leave the tensor
    /// untouched; decay applies to weight matrices only.
    pub fn update(&mut self, params: &mut Params, grads: &[Option<Array2<f64>>], lr: f64) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if params.name(i).ends_with(".w") || params.name(i).contains(".attn.") || params.name(i).contains(".x.") {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = params.value_mut(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let step = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *p -= lr * (step + decay * *p);
            });
        }
    }
}

/// Linear warmup then cosine decay from `base` to `min` over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Rescales gradients to a global L2 norm of at most `max`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array2<f64>>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max && norm > 0.0 {
        let c = max / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }
    norm
}
