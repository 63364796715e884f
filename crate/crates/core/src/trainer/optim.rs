use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

#[derive(Debug, Clone)]
pub(crate) struct AdamW {
    cfg: AdamWConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub(crate) fn new(cfg: AdamWConfig, lr: f64, n: usize) -> Self {
        AdamW {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `params` and `grads` are laid out identically across calls.
    pub(crate) fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let mut idx = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (theta, &grad) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = c.beta1 * *m + (1.0 - c.beta1) * grad;
                *v = c.beta2 * *v + (1.0 - c.beta2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= self.lr * c.weight_decay * *theta;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
                idx += 1;
            }
        }
    }
}
