//! AdamW with decoupled weight decay and bias correction.

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;
use crate::NnError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: None,
        }
    }
}

/// Moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64, NnError> {
        if self.m.len() != store.len() {
            return Err(NnError::Mismatch("optimizer state does not match the parameter store".into()));
        }
        let norm = grads.norm(store);
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get_ref(store, id).cloned();
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..p.data.len() {
                let gk = g.as_ref().map_or(0.0, |t| t.data[k]) * clip;
                p.data[k] *= 1.0 - c.lr * c.weight_decay;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }

    /// Moments as named tensors for checkpointing.
    pub fn named_state(&self, store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for id in store.ids() {
            out.push((format!("{prefix}m.{}", store.name(id)), self.m[id.0].clone()));
            out.push((format!("{prefix}v.{}", store.name(id)), self.v[id.0].clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, prefix: &str, tensors: &[(String, Tensor)], step: u64) -> Result<(), NnError> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NnError::Mismatch(format!("missing optimizer tensor {name}")))
        };
        for id in store.ids() {
            let m = find(format!("{prefix}m.{}", store.name(id)))?;
            let v = find(format!("{prefix}v.{}", store.name(id)))?;
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(NnError::Mismatch(format!("optimizer state shape for {}", store.name(id))));
            }
            self.m[id.0] = m;
            self.v[id.0] = v;
        }
        self.step = step;
        Ok(())
    }
}
