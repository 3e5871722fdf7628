//! Data generators with known ground truth.

pub mod synthetic;
pub mod tumor;

pub use synthetic::{simulate_synthetic, CoefficientPrior, SynthCoefficients, SynthConfig};
pub use tumor::{simulate_tumor, TrajectoryEnd, TumorConfig, TumorSimulation};

use crate::data::Dataset;

/// `(t, j)` pairs where every active patient (at least `min_active` of them)
/// received the same value of treatment `j` at step `t`.
pub fn positivity_violations(ds: &Dataset, min_active: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..ds.max_len() {
        let active: Vec<_> = ds.patients.iter().filter(|p| p.len() > t).collect();
        if active.len() < min_active.max(1) {
            continue;
        }
        for j in 0..ds.k {
            let ones = active.iter().filter(|p| p.a[t][j] == 1).count();
            if ones == 0 || ones == active.len() {
                out.push((t, j));
            }
        }
    }
    out
}
