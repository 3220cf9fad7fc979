use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, ParamKey, Tensor, VarId};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named parameter tensors with gradient buffers.
///
/// Values are reference counted so that a forward graph can hold them
/// without copying; updates copy-on-write only while a graph is alive.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Tensor>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
            grads: self.grads.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(Arc::new(value));
        self.names.push(name);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn grad(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.grads[idx]
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen stores enter graphs as constants and never accumulate.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn var(&self, g: &mut Graph, idx: usize) -> VarId {
        g.param(
            ParamKey {
                store: self.id,
                index: idx,
            },
            Arc::clone(&self.values[idx]),
            !self.frozen,
        )
    }

    /// Add the gradients that belong to this store into its buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        if self.frozen {
            return;
        }
        for (key, g) in grads.params() {
            if key.store == self.id {
                self.grads[key.index].add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_map(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, v)| (format!("{prefix}{n}"), v.clone()))
            .collect()
    }

    /// Overwrite every parameter from `map`; names must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for i in 0..self.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t.clone());
        }
        Ok(())
    }
}
