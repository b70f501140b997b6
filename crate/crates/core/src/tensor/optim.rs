use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Parameters whose gradient is `None`
/// for a step are left untouched, decay included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw", &[store.len()], &[grads.len()]));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let n = p.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let decay = 1.0 - c.lr * c.weight_decay;
            for ((pi, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi *= decay;
                *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
