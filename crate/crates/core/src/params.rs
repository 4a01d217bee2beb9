//! Named parameter storage shared by all stages of a network.

use crate::graph::{Graph, ParamId, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries are bound as constants and skipped by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Binds a parameter into `g`: as a differentiable parameter when
    /// trainable, otherwise as a constant.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        if e.trainable {
            g.param(id, &e.value)
        } else {
            g.constant(e.value.clone())
        }
    }

    /// Snapshot of all trainable parameters.
    pub fn trainable(&self) -> Vec<(ParamId, Tensor)> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, e)| (id, e.value.clone()))
            .collect()
    }

    /// Freezes every trainable entry whose name starts with `prefix` and
    /// returns the ids that changed, for [`ParamStore::unfreeze`].
    pub fn freeze_prefix(&mut self, prefix: &str) -> Vec<ParamId> {
        let mut frozen = Vec::new();
        for (i, e) in self.entries.iter_mut().enumerate() {
            if e.trainable && e.name.starts_with(prefix) {
                e.trainable = false;
                frozen.push(ParamId(i));
            }
        }
        frozen
    }

    pub fn unfreeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.entries[id.0].trainable = true;
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}
