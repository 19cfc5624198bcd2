use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Subnetwork this parameter belongs to; freezing works per group.
    pub group: String,
    pub value: Tensor,
    pub weight_decay: f64,
    pub frozen: bool,
}

/// Flat, named parameter storage shared by all subnetworks of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor, weight_decay: f64) -> ParamId {
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        self.params.push(Param {
            name: name.into(),
            group: group.into(),
            value,
            weight_decay,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze_group(&mut self, group: &str) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = true;
        }
    }

    pub fn group_frozen(&self, group: &str) -> bool {
        let mut any = false;
        for p in self.params.iter().filter(|p| p.group == group) {
            any = true;
            if !p.frozen {
                return false;
            }
        }
        any
    }

    /// Snapshot of every value in a group, for bit-level comparisons.
    pub fn group_values(&self, group: &str) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
