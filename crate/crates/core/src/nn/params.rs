//! Named parameter storage with per-group trainability.

use std::collections::BTreeMap;

use crate::error::{ConfuError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub group: String,
    pub value: Tensor<S>,
}

/// All learnable tensors of a model bundle.
///
/// Parameters belong to named groups; only groups flagged trainable ever
/// receive gradients or optimizer updates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, ParamId>,
    trainable: BTreeMap<String, bool>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new(), trainable: BTreeMap::new() }
    }

    /// Registers a parameter; new groups start trainable.
    pub fn add(&mut self, group: &str, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(ConfuError::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), group: group.to_string(), value });
        self.by_name.insert(name.to_string(), id);
        self.trainable.entry(group.to_string()).or_insert(true);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, bool)> {
        self.trainable.iter().map(|(g, &t)| (g.as_str(), t))
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, group: &str, trainable: bool) {
        self.trainable.insert(group.to_string(), trainable);
    }

    /// Freezes every group, then unfreezes the listed ones.
    pub fn train_only(&mut self, groups: &[&str]) {
        for (g, t) in self.trainable.iter_mut() {
            *t = groups.contains(&g.as_str());
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let group = &self.params[id.0].group;
        self.trainable.get(group).copied().unwrap_or(false)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Adds gradients into the slots of trainable parameters; gradients for
    /// frozen parameters are dropped.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<S>)]) -> Result<()> {
        for (id, g) in grads {
            if self.is_trainable(*id) {
                self.params[id.0].value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self, group: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", "w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("b", "w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn frozen_groups_never_receive_gradients() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("target", "w", Tensor::zeros(&[2])).unwrap();
        let p = s.add("soft", "p", Tensor::zeros(&[2])).unwrap();
        s.set_trainable("target", false);
        s.accumulate(&[(w, vec![1.0, 1.0]), (p, vec![2.0, 3.0])]).unwrap();
        assert!(s.get(w).grad().is_none());
        assert_eq!(s.get(p).grad().unwrap(), &[2.0, 3.0]);
    }
}
