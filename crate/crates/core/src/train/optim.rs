//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment buffers, kept in f64 and only for trainable parameters.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new<T: Float>(store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| (id, (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])))
            .collect();
        OptimState { step: 0, moments }
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }
}

/// One update of every trainable parameter. `lr_for` gives each parameter's rate.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState,
    lr_for: &dyn Fn(ParamId) -> f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (&id, (m, v)) in state.moments.iter_mut() {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::Numeric(format!("missing gradient for trainable {}", store.get(id).name)))?;
        let lr = lr_for(id);
        let mut data: Vec<T> = store.tensor(id).data().to_vec();
        for i in 0..data.len() {
            let gi = g[i].to_f64_lossy();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mut w = data[i].to_f64_lossy();
            w -= lr * cfg.weight_decay * w;
            w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            data[i] = T::from_f64_lossy(w);
        }
        store.set_data(id, &data)?;
    }
    Ok(())
}
