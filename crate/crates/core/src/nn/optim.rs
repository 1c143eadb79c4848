//! SGD with momentum and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay the learning rate along a half cosine over the run.
    pub cosine: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 0.0, cosine: true }
    }
}

pub struct Sgd {
    cfg: SgdConfig,
    total_steps: usize,
    step: usize,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps: total_steps.max(1), step: 0, velocity: Vec::new() }
    }

    pub fn current_lr(&self) -> f64 {
        if !self.cfg.cosine {
            return self.cfg.lr;
        }
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Applies one update. Parameters in `frozen` (and buffers) are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], frozen: &dyn Fn(ParamId) -> bool) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let lr = self.current_lr() as f32;
        let mom = self.cfg.momentum as f32;
        let wd = self.cfg.weight_decay as f32;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) || frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else { continue };
            let p = params.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let grad = gv + wd * *pv;
                *vv = mom * *vv + grad;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cosine: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, cosine: false }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    total_steps: usize,
    step: usize,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps: total_steps.max(1), step: 0, moments: Vec::new() }
    }

    pub fn current_lr(&self) -> f64 {
        if !self.cfg.cosine {
            return self.cfg.lr;
        }
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], frozen: &dyn Fn(ParamId) -> bool) {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let alpha = (lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t))) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) || frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else { continue };
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, m), v), gv) in params.get_mut(id).data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                *p -= alpha * *m / (v.sqrt() + eps);
            }
        }
        self.step += 1;
    }
}
