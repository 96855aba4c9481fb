use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds observed batch statistics into the running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_bn_update(&mut self, name: &str, mean: &[f64], var: &[f64], momentum: f64) {
        for (suffix, fresh) in [("mean", mean), ("var", var)] {
            let key = format!("{name}.{suffix}");
            let buf = self.buffers.get_mut(&key).unwrap_or_else(|| panic!("missing buffer {key}"));
            for (r, &b) in buf.data.iter_mut().zip(fresh) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}
