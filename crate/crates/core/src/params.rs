//! Named parameter storage and gradient buffers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HapError, Result};
use crate::numeric::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    // Shared so tapes can bind parameters without copying them.
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

/// On-disk form of a single parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(HapError::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(value));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Insert a tensor of `shape` with elements drawn from `U(-bound, bound)`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: Shape,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let data = (0..shape.numel())
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Shape) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| HapError::Lookup {
                kind: "parameter",
                key: name.to_string(),
            })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.tensor(self.id(name)?))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.shape().numel()).sum()
    }

    /// Replace the values of a parameter; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = self.tensors[id.0].shape();
        if old != value.shape() {
            return Err(HapError::shape("ParamStore::set", old, value.shape()));
        }
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    /// Apply an in-place update to every element of one parameter. Non-finite
    /// results are rejected and leave the parameter unchanged.
    pub fn update(&mut self, id: ParamId, mut f: impl FnMut(usize, f64) -> f64) -> Result<()> {
        let t = &self.tensors[id.0];
        let data: Vec<f64> = t.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        let updated = Tensor::from_vec(t.shape(), data)?;
        self.tensors[id.0] = Arc::new(updated);
        Ok(())
    }

    pub fn to_entries(&self) -> BTreeMap<String, ParamEntry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.clone(),
                    ParamEntry {
                        shape: [t.shape().rows, t.shape().cols],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrite every parameter of `self` from `entries`. Names and shapes
    /// must match exactly; extra entries are rejected.
    pub fn load_entries(&mut self, entries: &BTreeMap<String, ParamEntry>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(HapError::Schema(format!(
                "expected {} parameters, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, entry) in entries {
            let id = self
                .id(name)
                .map_err(|_| HapError::Schema(format!("unexpected parameter `{name}`")))?;
            let shape = Shape::new(entry.shape[0], entry.shape[1]);
            let t = Tensor::from_vec(shape, entry.values.clone())
                .map_err(|e| HapError::Schema(format!("parameter `{name}`: {e}")))?;
            self.set(id, t)
                .map_err(|e| HapError::Schema(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }
}

/// Gradient storage laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store
                .tensors
                .iter()
                .map(|t| vec![0.0; t.shape().numel()])
                .collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        self.grads[id.0]
            .iter_mut()
            .zip(g)
            .for_each(|(o, x)| *o += x);
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_slice()))
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(o, x)| *o += x);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_and_duplicates() {
        let mut s = ParamStore::new();
        let id = s.insert_zeros("a", Shape::new(2, 2)).unwrap();
        assert_eq!(s.id("a").unwrap(), id);
        assert!(matches!(s.id("b"), Err(HapError::Lookup { .. })));
        assert!(s.insert_zeros("a", Shape::scalar()).is_err());
    }

    #[test]
    fn uniform_init_is_seeded_and_bounded() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = ParamStore::new();
            s.insert_uniform("w", Shape::new(8, 8), 0.1, &mut rng)
                .unwrap();
            s
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn entries_round_trip_and_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert_uniform("x", Shape::new(2, 3), 1.0, &mut rng)
            .unwrap();
        s.insert_uniform("y", Shape::vector(4), 1.0, &mut rng)
            .unwrap();
        let entries = s.to_entries();
        let mut t = s.clone();
        t.update(t.id("x").unwrap(), |_, _| 0.0).unwrap();
        t.load_entries(&entries).unwrap();
        assert_eq!(s, t);

        let mut bad = entries.clone();
        bad.get_mut("x").unwrap().shape = [3, 2];
        assert!(matches!(t.load_entries(&bad), Err(HapError::Schema(_))));
        let mut bad = entries;
        let e = bad.remove("y").unwrap();
        bad.insert("z".into(), e);
        assert!(matches!(t.load_entries(&bad), Err(HapError::Schema(_))));
    }

    #[test]
    fn update_rejects_non_finite() {
        let mut s = ParamStore::new();
        let id = s.insert_zeros("a", Shape::vector(2)).unwrap();
        assert!(s.update(id, |_, _| f64::NAN).is_err());
        assert_eq!(s.tensor(id).data(), &[0.0, 0.0]);
    }
}
