//! Named parameter store.
//!
//! Every model tensor lives here under a stable dotted name with a
//! `trainable` flag. The flat map is the single source of truth for the
//! frozen/trainable partition, optimizer state keys, checkpoint archives,
//! and freeze-audit hashes. `BTreeMap` keeps iteration order deterministic.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// (frozen, trainable) name lists; disjoint and exhaustive by
    /// construction.
    pub fn partition(&self) -> (Vec<String>, Vec<String>) {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        for (name, p) in &self.map {
            if p.trainable {
                trainable.push(name.clone());
            } else {
                frozen.push(name.clone());
            }
        }
        (frozen, trainable)
    }

    pub fn total_count(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Content hash per parameter; the freeze audit compares these across
    /// training runs.
    pub fn content_hashes(&self) -> BTreeMap<String, String> {
        self.map
            .iter()
            .map(|(name, p)| (name.clone(), p.value.content_hash()))
            .collect()
    }
}

/// Parameter name -> graph leaf for one forward/backward pass.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Inserts every parameter as a graph leaf; only trainable parameters
/// request gradients, so frozen tensors never accumulate any.
pub fn bind_all(store: &ParamStore, g: &mut Graph) -> Binding {
    let mut ids = BTreeMap::new();
    for (name, p) in store.iter() {
        let id = g.leaf(p.value.clone(), p.trainable);
        ids.insert(name.clone(), id);
    }
    Binding { ids }
}

/// Gradients for every trainable parameter after `backward`; parameters the
/// loss never touched get explicit zeros so optimizer state stays aligned
/// with the trainable partition.
pub fn collect_grads(g: &Graph, binding: &Binding, store: &ParamStore) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = binding
            .ids
            .get(name)
            .and_then(|&id| g.grad(id).cloned())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        out.insert(name.clone(), grad);
    }
    out
}
