use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scalar::Real;

/// Location of one named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter buffer with named, grouped tensors. Gradients and optimizer
/// moments share the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    slots: Vec<Slot>,
    data: Vec<T>,
}

impl<T: Real> NetworkParams<T> {
    pub(crate) fn from_parts(slots: Vec<Slot>, data: Vec<T>) -> Self {
        debug_assert_eq!(slots.iter().map(|s| s.len).sum::<usize>(), data.len());
        Self { slots, data }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, slot: usize) -> &[T] {
        let s = &self.slots[slot];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut [T] {
        let s = &self.slots[slot];
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    /// Converts precision, keeping the layout.
    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            slots: self.slots.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.data.len(), "parameter layout mismatch");
        Self {
            slots: self.slots.clone(),
            data,
        }
    }

    /// Parameter count per group, in group name order.
    pub fn count_by_group(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.slots {
            *counts.entry(s.group.clone()).or_insert(0) += s.len;
        }
        counts
    }

    /// Group owning flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<&str> {
        self.slots
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&i))
            .map(|s| s.group.as_str())
    }
}
