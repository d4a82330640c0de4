//! Flat, key-addressed parameter storage shared by every learnable component.
//!
//! Parameters, gradients, and optimizer moments all use the same
//! `name -> 2-d array` layout, so the optimizer and the checkpoint writer
//! never need to know the model structure. Biases are stored as `1 x n`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Registry of named learnable arrays. Key order is lexicographic, which
/// makes every whole-registry walk (updates, serialization) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Array2<f64>>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Overwrites any previous array under the key.
    pub fn insert(&mut self, key: impl Into<String>, value: Array2<f64>) {
        self.map.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Result<&Array2<f64>> {
        self.map
            .get(key)
            .ok_or_else(|| Error::Shape(format!("unknown parameter key '{key}'")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Array2<f64>> {
        self.map
            .get_mut(key)
            .ok_or_else(|| Error::Shape(format!("unknown parameter key '{key}'")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Monotone counter identifying the current parameter snapshot.
    /// Forward caches record it; the backward pass rejects mismatches.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mark the registry as mutated (call after any in-place update).
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Total number of scalar entries across all arrays.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn to_serializable(&self) -> BTreeMap<String, TensorData> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), TensorData::from_array(v)))
            .collect()
    }

    pub fn from_serializable(data: BTreeMap<String, TensorData>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, t) in data {
            map.insert(k, t.into_array()?);
        }
        Ok(Self { map, version: 0 })
    }
}

/// Shape-tagged array payload used in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data)
            .map_err(|e| Error::Shape(format!("tensor shape mismatch: {e}")))
    }
}

/// Per-parameter gradient accumulator keyed identically to [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct GradientBundle {
    map: BTreeMap<String, Array2<f64>>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-filled gradients mirroring every parameter shape.
    pub fn zeros_like(params: &ParamSet) -> Self {
        let map = params
            .iter()
            .map(|(k, v)| (k.to_string(), Array2::zeros(v.raw_dim())))
            .collect();
        Self { map }
    }

    /// Accumulate `delta` into the gradient stored under `key`.
    pub fn accumulate(&mut self, key: &str, delta: &Array2<f64>) {
        match self.map.get_mut(key) {
            Some(g) => *g += delta,
            None => {
                self.map.insert(key.to_string(), delta.clone());
            }
        }
    }

    /// Accumulate every entry of `other` into `self`.
    pub fn merge(&mut self, other: &GradientBundle) {
        for (k, v) in &other.map {
            self.accumulate(k, v);
        }
    }

    /// Multiply every stored gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn get(&self, key: &str) -> Option<&Array2<f64>> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Largest absolute entry across all gradients; useful for divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|a| a.iter())
            .fold(0.0_f64, |m, &x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accumulate_then_merge() {
        let mut a = GradientBundle::new();
        a.accumulate("w", &array![[1.0, 2.0]]);
        a.accumulate("w", &array![[0.5, 0.5]]);
        let mut b = GradientBundle::new();
        b.accumulate("w", &array![[1.0, 1.0]]);
        b.merge(&a);
        assert_eq!(b.get("w").unwrap(), &array![[2.5, 3.5]]);
    }

    #[test]
    fn zeros_like_mirrors_shapes() {
        let mut p = ParamSet::new();
        p.insert("a", Array2::ones((2, 3)));
        p.insert("b", Array2::ones((1, 4)));
        let g = GradientBundle::zeros_like(&p);
        assert_eq!(g.get("a").unwrap().dim(), (2, 3));
        assert_eq!(g.get("b").unwrap().dim(), (1, 4));
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn tensor_roundtrip_is_exact() {
        let a = array![[0.1, 0.2, f64::MIN_POSITIVE], [1e300, -0.0, 3.5]];
        let t = TensorData::from_array(&a);
        let b = t.into_array().unwrap();
        assert_eq!(a, b);
    }
}
