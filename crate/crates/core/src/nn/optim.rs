//! Adam optimizer with optional global-norm gradient clipping.

use ndarray::ArrayD;

use super::params::{Grads, ParamStore};

/// Adam hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value before stepping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam state: first/second moment per parameter slot.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update. Parameters with no gradient (frozen or unused this
    /// step) are left untouched and their moments do not advance.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        assert_eq!(self.m.len(), store.len(), "optimizer/store size mismatch");
        let mut grads_scale = 1.0;
        if let Some(max_norm) = self.cfg.clip_norm {
            let mut sq = 0.0;
            for (_, g) in grads.iter() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                grads_scale = max_norm / norm;
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(id);
            for ((pv, (mv, vv)), gv) in p
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.iter())
            {
                let gs = gv * grads_scale;
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gs;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gs * gs;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
