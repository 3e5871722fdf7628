//! Autoregressive simulator with single-cause covariates and a multi-cause
//! hidden confounder.
//!
//! ```text
//! X_{t,j} = (1/p) Σ_i (α_{i,j} X_{t−i,j} + ω_{i,j} A_{t−i,j}) + η
//! Z_t     = (1/p) Σ_i (β_i Z_{t−i} + Σ_j λ_{i,j} A_{t−i,j}) + ε
//! π_{tj}  = γ_A Ẑ_t + (1−γ_A) X̂_{tj},   A_{tj} ~ Bernoulli(σ(λ π_{tj}))
//! Y_{t+1} = γ_Y Z_{t+1} + (1−γ_Y) mean_j X_{t+1,j}
//! ```
//!
//! Lags before the first step contribute zero; the `1/p` factor is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{config_hash, Dataset, PatientTrajectory, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream};

/// Prior for one coefficient family, indexed by lag `i = 1..=p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientPrior {
    Normal { mean: f64, std: f64 },
    /// `N(1 − i/p, (1/p)²)`.
    DecayingLag,
}

impl CoefficientPrior {
    fn draw(&self, rng: &mut RngStream, lag: usize, p: usize) -> f64 {
        match *self {
            Self::Normal { mean, std } => rng.normal(mean, std),
            Self::DecayingLag => {
                let p = p as f64;
                rng.normal(1.0 - lag as f64 / p, 1.0 / p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Number of treatments, equal to the number of covariates.
    pub k: usize,
    /// Autoregressive lag order.
    pub p: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Treatment-assignment sharpness.
    pub sharpness: f64,
    pub gamma_a: f64,
    pub gamma_y: f64,
    /// Number of simulated confounder channels.
    pub d_true: usize,
    pub noise_std: f64,
    /// Standard deviation of the initial `X_0` and `Z_0` draws.
    pub init_std: f64,
    /// Covariate self-lag coefficients.
    pub alpha: CoefficientPrior,
    /// Treatment-to-covariate coefficients.
    pub omega: CoefficientPrior,
    /// Confounder self-lag coefficients.
    pub beta: CoefficientPrior,
    /// Treatment-to-confounder coefficients.
    pub lambda: CoefficientPrior,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            k: 3,
            p: 5,
            t_min: 20,
            t_max: 30,
            sharpness: 15.0,
            gamma_a: 0.5,
            gamma_y: 0.5,
            d_true: 1,
            noise_std: 0.01,
            init_std: 0.1,
            alpha: CoefficientPrior::Normal {
                mean: 0.0,
                std: 0.5,
            },
            omega: CoefficientPrior::DecayingLag,
            beta: CoefficientPrior::DecayingLag,
            lambda: CoefficientPrior::Normal {
                mean: 0.0,
                std: 0.5,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma_a = gamma;
        self.gamma_y = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma_a) || !unit.contains(&self.gamma_y) {
            return Err(Error::config("confounding weights must lie in [0, 1]"));
        }
        if self.p == 0 || self.k == 0 || self.d_true == 0 {
            return Err(Error::config("p, k and d_true must be at least 1"));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::config(format!(
                "invalid trajectory length range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.noise_std < 0.0 || self.init_std < 0.0 || !self.sharpness.is_finite() {
            return Err(Error::config("noise scales must be non-negative"));
        }
        Ok(())
    }
}

/// One draw of every autoregressive coefficient. Lag index `i−1` stores lag `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCoefficients {
    pub p: usize,
    /// `p × k`.
    pub alpha: Vec<Vec<f64>>,
    /// `p × k`.
    pub omega: Vec<Vec<f64>>,
    /// `d_true × p`.
    pub beta: Vec<Vec<f64>>,
    /// `d_true × p × k`.
    pub lambda: Vec<Vec<Vec<f64>>>,
}

impl SynthCoefficients {
    pub fn draw(config: &SynthConfig, rng: &mut RngStream) -> Self {
        let (p, k) = (config.p, config.k);
        let per_lag = |prior: CoefficientPrior, rng: &mut RngStream| -> Vec<Vec<f64>> {
            (1..=p)
                .map(|i| (0..k).map(|_| prior.draw(rng, i, p)).collect())
                .collect()
        };
        let alpha = per_lag(config.alpha, rng);
        let omega = per_lag(config.omega, rng);
        let mut beta = Vec::with_capacity(config.d_true);
        let mut lambda = Vec::with_capacity(config.d_true);
        for _ in 0..config.d_true {
            beta.push((1..=p).map(|i| config.beta.draw(rng, i, p)).collect());
            lambda.push(per_lag(config.lambda, rng));
        }
        Self {
            p,
            alpha,
            omega,
            beta,
            lambda,
        }
    }
}

/// `X_{t,j}` given covariate and treatment histories indexed by time (only
/// entries before `t` are read) and the noise draw `eta`.
pub fn covariate_step(
    coeffs: &SynthCoefficients,
    x: &[Vec<f64>],
    a: &[Vec<u8>],
    t: usize,
    j: usize,
    eta: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 1..=coeffs.p.min(t) {
        acc += coeffs.alpha[i - 1][j] * x[t - i][j] + coeffs.omega[i - 1][j] * f64::from(a[t - i][j]);
    }
    acc / coeffs.p as f64 + eta
}

/// Channel `c` of `Z_t`, reading `z[s][c]` and `a[s]` for `s < t`.
pub fn confounder_step(
    coeffs: &SynthCoefficients,
    z: &[Vec<f64>],
    a: &[Vec<u8>],
    t: usize,
    c: usize,
    eps: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 1..=coeffs.p.min(t) {
        let treat: f64 = coeffs.lambda[c][i - 1]
            .iter()
            .zip(&a[t - i])
            .map(|(l, &av)| l * f64::from(av))
            .sum();
        acc += coeffs.beta[c][i - 1] * z[t - i][c] + treat;
    }
    acc / coeffs.p as f64 + eps
}

/// Sum of `series[s][col]` over the last `p` steps ending at `t` inclusive.
pub fn lagged_sum(series: &[Vec<f64>], t: usize, p: usize, col: usize) -> f64 {
    let start = (t + 1).saturating_sub(p);
    series[start..=t].iter().map(|row| row[col]).sum()
}

/// `γ_A Ẑ + (1−γ_A) X̂`.
pub fn treatment_score(x_hat: f64, z_hat: f64, gamma_a: f64) -> f64 {
    gamma_a * z_hat + (1.0 - gamma_a) * x_hat
}

/// One independent Bernoulli(σ(λ π_j)) draw per treatment.
pub fn assign_treatments(
    x_hat: &[f64],
    z_hat: f64,
    gamma_a: f64,
    sharpness: f64,
    rng: &mut RngStream,
) -> Vec<u8> {
    x_hat
        .iter()
        .map(|&xh| u8::from(rng.bernoulli(sigmoid(sharpness * treatment_score(xh, z_hat, gamma_a)))))
        .collect()
}

/// `Y_{t+1}` from next-step confounders (averaged over channels) and covariates.
pub fn compute_outcome(z_next: &[f64], x_next: &[f64], gamma_y: f64) -> f64 {
    let z_mean = z_next.iter().sum::<f64>() / z_next.len() as f64;
    let x_mean = x_next.iter().sum::<f64>() / x_next.len() as f64;
    gamma_y * z_mean + (1.0 - gamma_y) * x_mean
}

fn simulate_patient(config: &SynthConfig, coeffs: &SynthCoefficients, mut rng: RngStream) -> PatientTrajectory {
    let (k, p, d) = (config.k, config.p, config.d_true);
    let t_len = rng.int_inclusive(config.t_min, config.t_max);
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(t_len + 1);
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(t_len + 1);
    let mut a: Vec<Vec<u8>> = Vec::with_capacity(t_len);
    let mut y = Vec::with_capacity(t_len);
    x.push((0..k).map(|_| rng.normal(0.0, config.init_std)).collect());
    z.push((0..d).map(|_| rng.normal(0.0, config.init_std)).collect());
    for t in 0..t_len {
        let x_hat: Vec<f64> = (0..k).map(|j| lagged_sum(&x, t, p, j)).collect();
        let z_hat = (0..d).map(|c| lagged_sum(&z, t, p, c)).sum::<f64>() / d as f64;
        a.push(assign_treatments(&x_hat, z_hat, config.gamma_a, config.sharpness, &mut rng));
        let next_x: Vec<f64> = (0..k)
            .map(|j| {
                let eta = rng.normal(0.0, config.noise_std);
                covariate_step(coeffs, &x, &a, t + 1, j, eta)
            })
            .collect();
        let next_z: Vec<f64> = (0..d)
            .map(|c| {
                let eps = rng.normal(0.0, config.noise_std);
                confounder_step(coeffs, &z, &a, t + 1, c, eps)
            })
            .collect();
        y.push(compute_outcome(&next_z, &next_x, config.gamma_y));
        x.push(next_x);
        z.push(next_z);
    }
    x.truncate(t_len);
    z.truncate(t_len);
    PatientTrajectory {
        x,
        a,
        y,
        z: Some(z),
        group: None,
    }
}

/// Simulates a full dataset. Coefficients are drawn once per dataset; each
/// patient uses its own child stream, so the result does not depend on
/// thread scheduling.
pub fn simulate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let coeffs = SynthCoefficients::draw(config, &mut root.child("coefficients", 0));
    let patients: Vec<PatientTrajectory> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(config, &coeffs, root.child("patient", i as u64)))
        .collect();
    let provenance = Provenance {
        generator: "synthetic".into(),
        config_hash: config_hash(config)?,
        seed: config.seed,
    };
    let mut ds = Dataset::new(patients, config.k, config.k, provenance)?;
    ds.config = Some(serde_json::to_value(config)?);
    Ok(ds)
}

/// Coefficients that [`simulate_synthetic`] draws for `config`.
pub fn synthetic_coefficients(config: &SynthConfig) -> SynthCoefficients {
    SynthCoefficients::draw(config, &mut RngStream::new(config.seed).child("coefficients", 0))
}
