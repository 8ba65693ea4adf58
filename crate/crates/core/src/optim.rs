//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{GradMap, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First and second moments keyed by `group/param`.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Frozen
    /// stores never receive gradients, so they are never touched.
    pub fn step(&mut self, stores: &mut [(&str, &mut ParamStore)], grads: &GradMap) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (key, store) in stores.iter_mut() {
            let Some(group) = grads.get(*key) else {
                continue;
            };
            for (name, g) in group {
                let slot = self
                    .moments
                    .entry(format!("{key}/{name}"))
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                store.update_with(name, |theta| {
                    let (m, v) = (&mut slot.0, &mut slot.1);
                    for i in 0..theta.len() {
                        let gi = g[i] + c.weight_decay * theta[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        theta[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                })?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, -1.0]);
        let mut grads = GradMap::new();
        grads.entry("net".into()).or_default().insert("w".into(), vec![0.5, -3.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut [("net", &mut store)], &grads).unwrap();
        let w = store.get("w").unwrap().data.clone();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", &[1], vec![2.0]);
        let mut grads = GradMap::new();
        grads.entry("net".into()).or_default().insert("w".into(), vec![0.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, weight_decay: 1e-3, ..Default::default() });
        opt.step(&mut [("net", &mut store)], &grads).unwrap();
        // sign of the decayed gradient is positive, so the weight shrinks
        assert!(store.get("w").unwrap().data[0] < 2.0);
    }

    #[test]
    fn frozen_store_with_gradients_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", &[1], vec![2.0]);
        store.freeze();
        let mut grads = GradMap::new();
        grads.entry("bank".into()).or_default().insert("w".into(), vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut [("bank", &mut store)], &grads), Err(Error::Frozen(_))));
    }
}
