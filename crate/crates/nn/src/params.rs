//! Named parameter storage and gradient maps.

use crate::tensor::Tensor;
use crate::NnError;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. Each store (and each
/// clone) carries a process-unique id so gradients from different stores
/// never mix on a shared tape.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrite values from a store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if self.names != other.names {
            return Err(NnError::Mismatch("parameter names differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(NnError::Mismatch("parameter shapes differ".into()));
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    /// Load named tensors; every parameter must be present with its shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<(), NnError> {
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| NnError::Mismatch(format!("missing parameter {name}")))?;
            if t.shape() != value.shape() {
                return Err(NnError::Mismatch(format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), value.shape())));
            }
            *value = (*t).clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
    }
}

/// Gradients keyed by (store uid, parameter index).
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<(u64, usize), Tensor>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, store: u64, id: usize, g: Tensor) {
        match self.map.get_mut(&(store, id)) {
            Some(t) => t.add_assign(&g),
            None => {
                self.map.insert((store, id), g);
            }
        }
    }

    /// Gradient of `id`; exact zeros when it did not influence the loss.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Tensor {
        match self.map.get(&(store.uid(), id.0)) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(store.uid(), id.0))
    }

    /// L2 norm over every gradient belonging to `store`.
    pub fn norm(&self, store: &ParamStore) -> f64 {
        store
            .ids()
            .filter_map(|id| self.get_ref(store, id))
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
