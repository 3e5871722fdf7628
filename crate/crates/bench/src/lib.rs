//! Shared fixtures for the benchmarks.

use deconfounder_core::data::{split_dataset, Dataset};
use deconfounder_core::factor::FactorModelConfig;
use deconfounder_core::sim::{simulate_synthetic, SynthConfig};

/// Confounded synthetic data at `gamma = 0.5`.
pub fn synthetic(n_patients: usize, seed: u64) -> Dataset {
    simulate_synthetic(&SynthConfig {
        n_patients,
        seed,
        ..SynthConfig::default().with_gamma(0.5)
    })
    .expect("default configuration is valid")
}

pub fn splits(n_patients: usize) -> (Dataset, Dataset, Dataset) {
    split_dataset(&synthetic(n_patients, 1), (0.8, 0.1, 0.1), 2).expect("enough patients")
}

pub fn one_epoch_factor_config() -> FactorModelConfig {
    FactorModelConfig {
        epochs: 1,
        ..FactorModelConfig::default()
    }
}
