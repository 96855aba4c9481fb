use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    pub(crate) v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in store.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for i in 0..p.numel() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        store.insert_param("x", Tensor::new([2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.param("x").unwrap().data.clone();
            let g: BTreeMap<_, _> =
                [("x".to_string(), Tensor::new([2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]))].into();
            opt.update(&mut store, &g);
        }
        let x = &store.param("x").unwrap().data;
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::default();
        store.insert_param("w", Tensor::new([1], vec![0.0]));
        let mut opt = Adam::new(0.01);
        opt.update(&mut store, &[("w".to_string(), Tensor::new([1], vec![5.0]))].into());
        assert!((store.param("w").unwrap().data[0] + 0.01).abs() < 1e-9);
    }
}
