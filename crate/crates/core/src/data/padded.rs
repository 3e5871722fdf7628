use super::{Dataset, PatientTrajectory};
use crate::numerics::Tensor;

/// Zero-padded dense view of a dataset. Every padded entry is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// `N × T_max × covariate_dim`.
    pub x: Tensor,
    /// `N × T_max × k`, as 0.0 / 1.0.
    pub a: Tensor,
    /// `N × T_max`.
    pub y: Tensor,
    /// `N × T_max × D`, present when every patient carries confounders.
    pub z: Option<Tensor>,
    /// `N × T_max`, prefix mask.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub groups: Vec<Option<u32>>,
}

impl PaddedBatch {
    pub fn num_patients(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.mask.shape()[1]
    }
}

pub fn pad_and_mask(ds: &Dataset) -> PaddedBatch {
    let n = ds.len();
    let t_max = ds.max_len();
    let (dx, k) = (ds.covariate_dim, ds.k);
    let dz = if ds.has_oracle_z() { ds.oracle_z_dim() } else { None };
    let mut x = Tensor::zeros(&[n, t_max, dx]);
    let mut a = Tensor::zeros(&[n, t_max, k]);
    let mut y = Tensor::zeros(&[n, t_max]);
    let mut mask = Tensor::zeros(&[n, t_max]);
    let mut z = dz.map(|d| Tensor::zeros(&[n, t_max, d]));
    for (i, p) in ds.patients.iter().enumerate() {
        for t in 0..p.len() {
            for j in 0..dx {
                x.set3(i, t, j, p.x[t][j]);
            }
            for j in 0..k {
                a.set3(i, t, j, f64::from(p.a[t][j]));
            }
            y.values_mut()[i * t_max + t] = p.y[t];
            mask.values_mut()[i * t_max + t] = 1.0;
            if let (Some(zt), Some(pz)) = (z.as_mut(), p.z.as_ref()) {
                for (d, &v) in pz[t].iter().enumerate() {
                    zt.set3(i, t, d, v);
                }
            }
        }
    }
    PaddedBatch {
        x,
        a,
        y,
        z,
        mask,
        lengths: ds.patients.iter().map(PatientTrajectory::len).collect(),
        groups: ds.patients.iter().map(|p| p.group).collect(),
    }
}

/// Inverse of [`pad_and_mask`] for the per-patient arrays.
pub fn unpad(batch: &PaddedBatch) -> Vec<PatientTrajectory> {
    let t_max = batch.t_max();
    let dx = batch.x.shape()[2];
    let k = batch.a.shape()[2];
    batch
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| PatientTrajectory {
            x: (0..len)
                .map(|t| (0..dx).map(|j| batch.x.at3(i, t, j)).collect())
                .collect(),
            a: (0..len)
                .map(|t| (0..k).map(|j| batch.a.at3(i, t, j) as u8).collect())
                .collect(),
            y: (0..len).map(|t| batch.y.values()[i * t_max + t]).collect(),
            z: batch.z.as_ref().map(|z| {
                let d = z.shape()[2];
                (0..len)
                    .map(|t| (0..d).map(|c| z.at3(i, t, c)).collect())
                    .collect()
            }),
            group: batch.groups[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;

    #[test]
    fn masks_are_prefixes() {
        let ds = toy_dataset(&[2, 3], 2, 0);
        let b = pad_and_mask(&ds);
        assert_eq!(b.t_max(), 3);
        assert_eq!(b.mask.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(b.mask.row(1), &[1.0, 1.0, 1.0]);
        assert_eq!(b.x.at3(0, 2, 0), 0.0);
        assert_eq!(b.y.at2(0, 2), 0.0);
    }

    #[test]
    fn equal_lengths_full_mask() {
        let b = pad_and_mask(&toy_dataset(&[4, 4, 4], 1, 0));
        assert!(b.mask.values().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn round_trip() {
        let ds = toy_dataset(&[2, 5, 3], 3, 4);
        assert_eq!(unpad(&pad_and_mask(&ds)), ds.patients);
    }
}
