use std::collections::BTreeMap;

use super::tensor::{Element, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: bool,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: false }
    }

    /// A store whose parameters are bound as constants on a graph.
    pub fn frozen() -> Self {
        Self { tensors: BTreeMap::new(), frozen: true }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Absorbs another store's entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Content hash over names, shapes and little-endian f32 values.
    pub fn content_hash(&self) -> String {
        let mut h = blake3::Hasher::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(&[0]);
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().to_hex().to_string()
    }
}
