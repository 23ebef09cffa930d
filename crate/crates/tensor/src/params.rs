use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameter collection shared by model code, graphs and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: &str, value: Tensor) -> String {
        let prev = self
            .params
            .insert(name.to_string(), Param { value: Arc::new(value), trainable: true });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
        name.to_string()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| p.value.as_ref())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::Missing(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}
