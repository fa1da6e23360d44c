use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named, shaped parameter tensors keyed by a dotted path.
///
/// Paths are unique and iteration order is lexicographic, which keeps
/// checkpoints, digests and optimizer traversal deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        self.entries.insert(path, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Param<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(path)?.tensor)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Overwrites the values of an existing tensor; the shape may not change.
    pub fn set_values(&mut self, path: &str, values: &[T]) -> Result<()> {
        let p = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        if p.tensor.numel() != values.len() {
            return Err(Error::Shape(format!(
                "`{path}` holds {} values, got {}",
                p.tensor.numel(),
                values.len()
            )));
        }
        p.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, path: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Marks every tensor under `prefix` trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (path, p) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copy of the tensors whose path starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every tensor of `other`; paths must not collide.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::DuplicateParam(k));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    /// Replaces values of tensors present in both trees, checking shapes.
    pub fn load_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.entries {
            let dst = self.entries.get_mut(k).ok_or_else(|| Error::UnknownParam(k.clone()))?;
            if dst.tensor.shape() != v.tensor.shape() {
                return Err(Error::IncompatibleConfig(format!(
                    "`{k}` has shape {:?} but checkpoint holds {:?}",
                    dst.tensor.shape(),
                    v.tensor.shape()
                )));
            }
            dst.tensor = v.tensor.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        Param {
                            tensor: v.tensor.cast(),
                            trainable: v.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over paths, shapes and the f32 little-endian bytes of every
    /// tensor whose path starts with `prefix` (empty prefix: all tensors).
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((k.len() as u32).to_le_bytes());
            h.update(k.as_bytes());
            for d in v.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.tensor.data() {
                h.update((x.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Seeded parameter factory. Each tensor draws from its own stream keyed by
/// its path, so initial values do not depend on construction order.
#[derive(Clone, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Normal(0, σ²) truncated to ±2σ.
    pub fn truncated_normal(&self, path: &str, shape: &[usize], std: f64) -> Tensor<f32> {
        let mut rng = seed::rng(self.seed, path);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                data.push((z * std) as f32);
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn weight(&self, tree: &mut ParamTree<f32>, path: &str, shape: &[usize]) -> Result<()> {
        let t = self.truncated_normal(path, shape, INIT_STD);
        tree.insert(path, t, true)
    }

    pub fn zeros(&self, tree: &mut ParamTree<f32>, path: &str, shape: &[usize]) -> Result<()> {
        tree.insert(path, Tensor::zeros(shape), true)
    }

    pub fn ones(&self, tree: &mut ParamTree<f32>, path: &str, shape: &[usize]) -> Result<()> {
        tree.insert(path, Tensor::full(shape, 1.0), true)
    }

    /// Uniform draws in `[-limit, limit]`; used only by tests that need
    /// parameters away from their structured initial values.
    pub fn uniform(&self, path: &str, shape: &[usize], limit: f64) -> Tensor<f32> {
        let mut rng = seed::rng(self.seed, path);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit) as f32).collect();
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut t = ParamTree::<f32>::new();
        t.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            t.insert("a", Tensor::zeros(&[2]), true),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn init_is_path_keyed_and_truncated() {
        let init = Init::new(3);
        let a = init.truncated_normal("x.w", &[64, 64], INIT_STD);
        let b = init.truncated_normal("x.w", &[64, 64], INIT_STD);
        let c = init.truncated_normal("y.w", &[64, 64], INIT_STD);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.max_abs() <= (2.0 * INIT_STD) as f32);
        let mean: f64 = a.data().iter().map(|&v| v as f64).sum::<f64>() / a.numel() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn digest_tracks_values_under_prefix() {
        let mut t = ParamTree::<f32>::new();
        t.insert("enc.w", Tensor::full(&[2], 1.0), true).unwrap();
        t.insert("head.w", Tensor::full(&[2], 1.0), true).unwrap();
        let before = t.digest("enc.");
        t.set_values("head.w", &[3.0, 4.0]).unwrap();
        assert_eq!(before, t.digest("enc."));
        t.set_values("enc.w", &[3.0, 4.0]).unwrap();
        assert_ne!(before, t.digest("enc."));
    }
}
