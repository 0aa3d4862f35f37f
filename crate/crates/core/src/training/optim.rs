use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> OptimizerState {
        let zeros: Vec<Tensor> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One decoupled-weight-decay Adam update. All gradients are checked
    /// before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for ((name, p), g) in store.names().iter().zip(store.values()).zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            if !g.all_finite() {
                return Err(Error::Divergence(format!("gradient of {name}")));
            }
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * (mh / (vh.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    if ema.len() != params.len() {
        return Err(Error::Dimension("EMA and parameter stores differ in size".into()));
    }
    for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
