//! Adam with bias correction, and the exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || store.iter().any(|(id, e)| self.m[id.index()].len() != e.value.len()) {
            return Err(Error::Shape("optimizer state does not match parameter store".into()));
        }
        Ok(())
    }

    /// One update of every parameter that appears in `grads`. Parameters
    /// not bound in the graph are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.check(store)?;
        let updates: Vec<(ParamId, Option<Vec<f64>>)> =
            grads.params().map(|(id, g)| (id, g.map(<[f64]>::to_vec))).collect();
        self.apply(store, updates.iter().map(|(id, g)| (*id, g.as_deref())), lr);
        Ok(())
    }

    /// Applies raw gradients; `None` means an all-zero gradient.
    pub fn apply<'a>(&mut self, store: &mut ParamStore, grads: impl Iterator<Item = (ParamId, Option<&'a [f64]>)>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// `lr0 · final_factor^(step / total_steps)`; `lr0` when `total_steps = 0`.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64, final_factor: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * final_factor.powf(step as f64 / total_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = [1.0];
        adam.apply(&mut store, std::iter::once((id, Some(&g[..]))), 0.01);
        // m̂ = v̂ = 1 → update = lr / (1 + ε)
        let want = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::from_rows(&[[0.5, -0.25]]));
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.apply(&mut store, std::iter::once((id, None)), 0.1);
        assert_eq!(store.get(id).data(), &[0.5, -0.25]);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 1000, 5e-4, 0.1), 5e-4);
        assert!((lr_schedule(1000, 1000, 5e-4, 0.1) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(500, 1000, 5e-4, 0.1) - 5e-4 * 10f64.powf(-0.5)).abs() < 1e-18);
        assert!((lr_schedule(500, 1000, 5e-4, 0.1) - 1.581e-4).abs() < 1e-7);
        assert_eq!(lr_schedule(7, 0, 5e-4, 0.1), 5e-4);
    }
}
