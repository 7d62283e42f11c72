use std::collections::HashMap;
use std::sync::Arc;

use super::{NumericsError, Tensor};

/// Ordered collection of named parameters.
///
/// Tensors are held behind `Arc` so a snapshot for concurrent rollouts is a
/// cheap clone; mutation goes through copy-on-write.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = Arc::new(value),
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, Arc::new(value)));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Shared handle, panicking on a missing name (model code only asks for
    /// names it created).
    pub fn arc(&self, name: &str) -> Arc<Tensor> {
        Arc::clone(
            self.get(name)
                .unwrap_or_else(|| panic!("missing parameter {name}")),
        )
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.into()))?;
        Ok(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Sub-store of every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            if name.starts_with(prefix) {
                out.index.insert(name.clone(), out.entries.len());
                out.entries.push((name.clone(), Arc::clone(t)));
            }
        }
        out
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (name, t) in &other.entries {
            match self.index.get(name) {
                Some(&i) => self.entries[i].1 = Arc::clone(t),
                None => {
                    self.index.insert(name.clone(), self.entries.len());
                    self.entries.push((name.clone(), Arc::clone(t)));
                }
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta == tb)
    }
}
