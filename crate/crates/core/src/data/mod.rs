//! Patient trajectories, datasets, splitting, padding and persistence.
//!
//! Index convention: for a trajectory of length `T`, entry `t` of `x`, `a`
//! and `z` holds the covariates, treatments and confounders at step `t`,
//! while `y[t]` holds the outcome observed *after* the treatments at `t`.

mod io;
mod padded;

pub use io::{load_dataset, meta_path, save_dataset};
pub use padded::{pad_and_mask, unpad, PaddedBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    /// `T × covariate_dim`.
    pub x: Vec<Vec<f64>>,
    /// `T × k`, entries 0 or 1.
    pub a: Vec<Vec<u8>>,
    /// `y[t]` is the outcome following step `t`.
    pub y: Vec<f64>,
    /// Simulated confounders, `T × D_true`, when the generator knows them.
    pub z: Option<Vec<Vec<f64>>>,
    pub group: Option<u32>,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn validate(&self, k: usize, covariate_dim: usize) -> std::result::Result<(), String> {
        let t_len = self.y.len();
        if self.x.len() != t_len || self.a.len() != t_len {
            return Err(format!(
                "length mismatch: x has {}, a has {}, y has {}",
                self.x.len(),
                self.a.len(),
                t_len
            ));
        }
        if let Some(row) = self.x.iter().find(|r| r.len() != covariate_dim) {
            return Err(format!(
                "covariate row has {} entries, expected {covariate_dim}",
                row.len()
            ));
        }
        if let Some(row) = self.a.iter().find(|r| r.len() != k) {
            return Err(format!("treatment row has {} entries, expected {k}", row.len()));
        }
        if self.a.iter().flatten().any(|&v| v > 1) {
            return Err("treatments must be 0 or 1".into());
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err("non-finite outcome".into());
        }
        if self.x.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite covariate".into());
        }
        if let Some(z) = &self.z {
            if z.len() != t_len {
                return Err(format!("z has {} rows, expected {t_len}", z.len()));
            }
            let dz = z.first().map_or(0, Vec::len);
            if z.iter().any(|r| r.len() != dz) {
                return Err("ragged confounder rows".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub patients: Vec<PatientTrajectory>,
    pub k: usize,
    pub covariate_dim: usize,
    pub provenance: Provenance,
    /// Generator configuration, kept verbatim for the sidecar file.
    pub config: Option<serde_json::Value>,
}

impl Dataset {
    pub fn new(
        patients: Vec<PatientTrajectory>,
        k: usize,
        covariate_dim: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            patients,
            k,
            covariate_dim,
            provenance,
            config: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut z_dim = None;
        for (i, p) in self.patients.iter().enumerate() {
            p.validate(self.k, self.covariate_dim)
                .map_err(|m| Error::InvalidInput(format!("patient {i}: {m}")))?;
            if let Some(z) = &p.z {
                let dz = z.first().map_or(0, Vec::len);
                if *z_dim.get_or_insert(dz) != dz && !z.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "patient {i}: confounder dimension differs from earlier patients"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.patients.iter().map(PatientTrajectory::len).max().unwrap_or(0)
    }

    /// Total number of active (patient, step) pairs.
    pub fn num_steps(&self) -> usize {
        self.patients.iter().map(PatientTrajectory::len).sum()
    }

    pub fn has_oracle_z(&self) -> bool {
        !self.patients.is_empty() && self.patients.iter().all(|p| p.z.is_some())
    }

    pub fn oracle_z_dim(&self) -> Option<usize> {
        self.patients
            .iter()
            .find_map(|p| p.z.as_ref().and_then(|z| z.first().map(Vec::len)))
    }

    /// New dataset with the patients at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            k: self.k,
            covariate_dim: self.covariate_dim,
            provenance: self.provenance.clone(),
            config: self.config.clone(),
        }
    }

    /// Patients of `self` followed by those of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.k != other.k || self.covariate_dim != other.covariate_dim {
            return Err(Error::Shape {
                expected: vec![self.k, self.covariate_dim],
                actual: vec![other.k, other.covariate_dim],
            });
        }
        let mut out = self.clone();
        out.patients.extend(other.patients.iter().cloned());
        Ok(out)
    }

    /// Replaces every patient's confounder track, e.g. with substitutes.
    pub fn with_z(&self, z: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::Shape {
                expected: vec![self.len()],
                actual: vec![z.len()],
            });
        }
        let mut out = self.clone();
        for (p, zp) in out.patients.iter_mut().zip(z) {
            p.z = Some(zp);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn without_z(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.patients {
            p.z = None;
        }
        out
    }
}

/// Short hex digest of a configuration's canonical JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Random partition into (train, val, test).
///
/// Validation and test sizes are `floor(fraction · N)`; the remainder goes to
/// training.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f_train, f_val, f_test) = fractions;
    if [f_train, f_val, f_test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let n = ds.len();
    if n < 10 {
        return Err(Error::config(format!("need at least 10 patients to split, got {n}")));
    }
    let n_val = (f_val * n as f64 + 1e-9).floor() as usize;
    let n_test = (f_test * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "split of {n} patients leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut order);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val), ds.subset(test)))
}

/// Drops covariate column `j`. Indices of later columns shift down by one.
pub fn remove_covariate(ds: &Dataset, j: usize) -> Result<Dataset> {
    if j >= ds.covariate_dim {
        return Err(Error::InvalidInput(format!(
            "covariate index {j} out of range for dimension {}",
            ds.covariate_dim
        )));
    }
    let mut out = ds.clone();
    out.covariate_dim -= 1;
    for p in &mut out.patients {
        for row in &mut p.x {
            row.remove(j);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_dataset(lengths: &[usize], k: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let patients = lengths
            .iter()
            .map(|&t| PatientTrajectory {
                x: (0..t).map(|_| (0..k).map(|_| rng.normal(0.0, 1.0)).collect()).collect(),
                a: (0..t)
                    .map(|_| (0..k).map(|_| u8::from(rng.bernoulli(0.5))).collect())
                    .collect(),
                y: (0..t).map(|_| rng.normal(0.0, 1.0)).collect(),
                z: Some((0..t).map(|_| vec![rng.normal(0.0, 1.0)]).collect()),
                group: None,
            })
            .collect();
        Dataset::new(patients, k, k, Provenance::default()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let ds = toy_dataset(&vec![2; 5000], 1, 0);
        let (tr, va, te) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (4000, 500, 500));
        let ds = toy_dataset(&[2; 10], 1, 0);
        let (tr, va, te) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy_dataset(&[3; 40], 2, 1);
        let a = split_dataset(&ds, (0.8, 0.1, 0.1), 9).unwrap();
        let b = split_dataset(&ds, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_small_or_empty() {
        let ds = toy_dataset(&[3; 9], 2, 1);
        assert!(split_dataset(&ds, (0.8, 0.1, 0.1), 0).is_err());
        let ds = toy_dataset(&[3; 12], 2, 1);
        assert!(split_dataset(&ds, (0.95, 0.05, 0.0), 0).is_err());
        assert!(split_dataset(&ds, (0.5, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn remove_covariate_shapes() {
        let ds = toy_dataset(&[4, 5], 3, 2);
        let r = remove_covariate(&ds, 0).unwrap();
        assert_eq!(r.covariate_dim, 2);
        assert_eq!(r.patients[0].x[1], ds.patients[0].x[1][1..].to_vec());
        for (p, q) in r.patients.iter().zip(&ds.patients) {
            assert_eq!(p.a, q.a);
            let same = p.y.iter().zip(&q.y).all(|(u, v)| u.to_bits() == v.to_bits());
            assert!(same);
        }
        // Removing index 0 twice drops the original columns 0 and 1.
        let rr = remove_covariate(&r, 0).unwrap();
        assert_eq!(rr.patients[0].x[2], vec![ds.patients[0].x[2][2]]);
        assert!(remove_covariate(&ds, 3).is_err());
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let mut ds = toy_dataset(&[2], 1, 0);
        ds.patients[0].a[0][0] = 2;
        assert!(ds.validate().is_err());
    }
}
