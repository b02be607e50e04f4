use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// L2 penalty added to the gradient (coupled, as in classic Adam).
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over every trainable tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients that belong to `store`.
    /// Parameters without a gradient (unused in the graph) are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for idx in 0..store.len() {
            if !store.params()[idx].trainable {
                continue;
            }
            let Some(grad) = grads.get(store.key(ParamId(idx))) else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.get_mut(ParamId(idx)).data_mut();
            for i in 0..value.len() {
                let gi = grad.data()[i] + c.weight_decay * value[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
