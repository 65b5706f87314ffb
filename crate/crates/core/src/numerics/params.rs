use std::collections::BTreeMap;

use super::{Float, Graph, ParamId, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub group: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Flat, ordered parameter table shared by the base network and whatever is
/// plugged into it. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Tensor<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group: group.to_string(),
            value,
            trainable: true,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Register (once) the parameter in `g`.
    pub fn var(&self, g: &Graph<F>, id: ParamId) -> Var<F> {
        let e = &self.entries[id];
        g.param(id, &e.value, e.trainable)
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn group_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.group.clone()).or_insert(0) += e.value.numel();
        }
        out
    }

    /// Little-endian f32 bytes of every tensor in `group`, in order.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.value.to_le_f32_bytes())
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replace a value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id];
        if e.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }
}
