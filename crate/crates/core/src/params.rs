//! Named parameter storage shared by layers, optimizer and checkpoints.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    /// False for buffers such as BN running statistics.
    pub trainable: bool,
}

/// Running-statistics update recorded by a train-mode batch-norm forward.
/// Applied after the step so that forward passes only need `&ParamStore`.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>, trainable: bool) -> ParamId {
        let mut tensor = tensor;
        tensor.set_requires_grad(trainable);
        self.entries.push(Param {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.iter_mut().filter(|p| p.trainable) {
            p.tensor.zero_grad();
        }
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.entries[u.mean.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
            for (r, b) in self.entries[u.var.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
    }

    /// Replaces every tensor's values from `(name, tensor)` pairs, which
    /// must cover this store exactly with matching shapes.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format {
                what: "checkpoint",
                msg: format!(
                    "expected {} tensors, found {}",
                    self.entries.len(),
                    tensors.len()
                ),
            });
        }
        for (name, t) in tensors {
            let id = self.find(name).ok_or_else(|| Error::Format {
                what: "checkpoint",
                msg: format!("unexpected tensor `{name}`"),
            })?;
            let p = &mut self.entries[id.0];
            if p.tensor.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    left: p.tensor.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
