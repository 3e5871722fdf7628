use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// An ordered, named collection of tensors: the trainable state of a model,
/// or a gradient with the same layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.values());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape {
                expected: vec![self.num_values()],
                actual: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor
                .values_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Errors unless `other` has the same number of tensors with identical shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::config(format!(
                "parameter set has {} tensors, gradient has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::config(format!(
                    "shape mismatch for '{}': {:?} vs {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.tensor.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn fill(&mut self, value: f64) {
        for e in &mut self.entries {
            e.tensor.fill(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_and_assign_round_trip() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        p.push("b", Tensor::from_vec(&[1, 3], vec![3.0, 4.0, 5.0]).unwrap());
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&flat[..4]).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut p = ParamSet::new();
        p.push("g", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(p.clip_global_norm(1.0), 5.0);
        assert!((p.global_norm() - 1.0).abs() < 1e-15);
    }
}
