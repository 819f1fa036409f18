use std::collections::HashMap;

use crate::{Real, Result, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent. `decay` selects AdamW weight decay.
    Trainable { decay: bool },
    /// Non-learned state that still belongs to the model (running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors in registration order. Registration order is the checkpoint
/// manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names, which is a programming
    /// error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        let id = ParamId(self.entries.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.entries.push(ParamEntry { name, value, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.kind, ParamKind::Trainable { .. }))
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of scalar values across trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Replaces a value in place, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                left: cur.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Copies every value whose name exists in `other` with the same shape.
    /// Returns the names that were not found there.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &mut self.entries {
            match other.id(&e.name) {
                Some(id) if other.get(id).shape() == e.value.shape() => {
                    e.value = other.get(id).clone();
                }
                _ => missing.push(e.name.clone()),
            }
        }
        missing
    }

    /// Converts every entry to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Element-wise arithmetic mean of several stores with identical layout.
    pub fn average(stores: &[&ParamStore<T>]) -> Result<ParamStore<T>> {
        let first = stores
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("average of zero stores".into()))?;
        let mut out = (*first).clone();
        if stores.len() == 1 {
            return Ok(out);
        }
        let n = stores.len() as f64;
        for (i, entry) in out.entries.iter_mut().enumerate() {
            let mut acc = vec![0.0f64; entry.value.numel()];
            for s in stores {
                let other = &s.entries[i];
                if other.name != entry.name || other.value.shape() != entry.value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "ParamStore::average",
                        left: entry.value.shape().to_vec(),
                        right: other.value.shape().to_vec(),
                    });
                }
                for (a, v) in acc.iter_mut().zip(other.value.data()) {
                    *a += v.as_f64();
                }
            }
            for (dst, a) in entry.value.data_mut().iter_mut().zip(acc) {
                *dst = T::lit(a / n);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(vec![2], v), ParamKind::Trainable { decay: true });
        s.add("b", Tensor::full(vec![1], -v), ParamKind::Buffer);
        s
    }

    #[test]
    fn average_is_elementwise_mean() {
        let (a, b) = (store(1.0), store(3.0));
        let avg = ParamStore::average(&[&a, &b]).unwrap();
        assert_eq!(avg.get(ParamId(0)).data(), &[2.0, 2.0]);
        assert_eq!(avg.get(ParamId(1)).data(), &[-2.0]);
    }

    #[test]
    fn average_of_identical_stores_is_fixed_point() {
        let a = store(0.1234567);
        let avg = ParamStore::average(&[&a, &a, &a, &a, &a]).unwrap();
        for (x, y) in avg.entries().iter().zip(a.entries()) {
            for (p, q) in x.value.data().iter().zip(y.value.data()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn trainable_count_skips_buffers() {
        assert_eq!(store(1.0).num_trainable(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = store(1.0);
        s.add("w", Tensor::zeros(vec![1]), ParamKind::Buffer);
    }
}
