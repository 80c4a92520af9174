//! Named parameter storage shared by the model, optimizer, and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Index of a parameter within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

struct Entry {
    name: String,
    tensor: Tensor,
}

/// Ordered, name-keyed collection of trainable tensors.
///
/// Registration order is the canonical parameter order everywhere: gradient
/// vectors, optimizer state, and checkpoint blobs all use it.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.into(),
            tensor: tensor.with_grad(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Overwrites a parameter's values by name; shape must match.
    pub fn set_by_name(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if entry.tensor.numel() != data.len() {
            return Err(Error::shape(
                "set_by_name",
                format!(
                    "{name}: {:?} wants {} values, got {}",
                    entry.tensor.shape(),
                    entry.tensor.numel(),
                    data.len()
                ),
            ));
        }
        entry.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Truncated normal draw: std 0.02 scaled, resampled beyond two sigma.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(data, shape).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::zeros(&[3]));
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(store.name(b), "b");
        assert_eq!(store.total_values(), 5);
    }

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let t1 = trunc_normal(&mut r1, &[64], 0.02);
        let t2 = trunc_normal(&mut r2, &[64], 0.02);
        assert_eq!(t1.data(), t2.data());
        assert!(t1.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
