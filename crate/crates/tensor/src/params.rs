use std::collections::HashMap;

use crate::{Array, Result, TensorError};

pub type ParamId = usize;

/// Named trainable arrays in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter, replacing the value if the name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id] = value;
            return id;
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&Array> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }
}
