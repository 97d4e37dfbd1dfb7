use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment tensors per stored parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved state; moment shapes must line up with `store`.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>, store: &ParamStore) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer state has {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for ((_, name, p), (mt, vt)) in store.iter().zip(m.iter().zip(&v)) {
            if mt.shape() != p.shape() || vt.shape() != p.shape() {
                return Err(Error::Config(format!("optimizer moment shape mismatch for {name}")));
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.index()]
    }

    /// Applies one update. Parameters absent from `grads` (not reached by the
    /// loss) keep both their values and their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)]) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Config("optimizer was built for a different parameter set".into()));
        }
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adam", g.shape(), store.get(*id).shape()));
            }
            g.ensure_finite(&format!("gradient of {}", store.name(*id)))?;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
