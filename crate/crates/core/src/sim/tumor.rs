//! Pharmacokinetic-pharmacodynamic tumour growth under chemotherapy and
//! radiotherapy:
//!
//! ```text
//! V(t) = (1 + ρ log(K / V(t−1)) − β_c C(t) − (α_r d(t) + β_r d(t)²) + e_t) V(t−1)
//! ```
//!
//! Patient parameters, stage-dependent initial sizes and the size-driven
//! treatment policy follow the standard non-small-cell lung cancer set-up.
//! Patient subgroup shifts the prior means of `β_c` (group 3) and `α_r`
//! (group 1) and acts as a static confounder.

use std::f64::consts::{LN_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{config_hash, Dataset, PatientTrajectory, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream};

pub fn volume_from_diameter(diameter: f64) -> f64 {
    4.0 / 3.0 * PI * (diameter / 2.0).powi(3)
}

pub fn diameter_from_volume(volume: f64) -> f64 {
    2.0 * (volume / (4.0 / 3.0 * PI)).cbrt()
}

/// Log-normal initial diameter (cm) for one cancer stage, truncated to `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePrior {
    pub weight: f64,
    pub log_mean: f64,
    pub log_std: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub time_steps: usize,
    /// Carrying-capacity diameter (cm).
    pub capacity_diameter: f64,
    /// Diameter (cm) at which the patient dies and the trajectory stops.
    pub death_diameter: f64,
    /// Cells per cm³, used for the recovery probability `exp(−V·density)`.
    pub cell_density: f64,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub alpha_rho_corr: f64,
    pub alpha_beta_ratio: f64,
    pub beta_c_mean: f64,
    pub beta_c_std: f64,
    /// Relative prior-mean shift of `β_c` for group 3 and of `α_r` for group 1.
    pub subgroup_shift: f64,
    pub noise_std: f64,
    pub chemo_dose: f64,
    pub chemo_half_life: f64,
    pub radio_dose: f64,
    pub chemo_coeff: f64,
    pub radio_coeff: f64,
    /// Past steps averaged into the diameter that drives treatment.
    pub policy_window: usize,
    pub stages: Vec<StagePrior>,
    pub seed: u64,
}

impl Default for TumorConfig {
    fn default() -> Self {
        let stage = |count: f64, log_mean, log_std, upper| StagePrior {
            weight: count,
            log_mean,
            log_std,
            lower: 0.3,
            upper,
        };
        Self {
            n_train: 10_000,
            n_val: 1_000,
            n_test: 1_000,
            time_steps: 60,
            capacity_diameter: 30.0,
            death_diameter: 13.0,
            cell_density: 5.8e8,
            rho_mean: 7e-5,
            rho_std: 7.23e-3,
            alpha_mean: 0.0398,
            alpha_std: 0.168,
            alpha_rho_corr: 0.87,
            alpha_beta_ratio: 10.0,
            beta_c_mean: 0.028,
            beta_c_std: 0.0007,
            subgroup_shift: 0.1,
            noise_std: 0.01,
            chemo_dose: 5.0,
            chemo_half_life: 1.0,
            radio_dose: 2.0,
            chemo_coeff: 10.0,
            radio_coeff: 10.0,
            policy_window: 15,
            stages: vec![
                stage(1432.0, 1.72, 4.70, 5.0),
                stage(128.0, 1.96, 1.63, 13.0),
                stage(1306.0, 1.91, 9.40, 13.0),
                stage(7248.0, 2.76, 6.87, 13.0),
                stage(12840.0, 3.86, 8.82, 13.0),
            ],
            seed: 0,
        }
    }
}

impl TumorConfig {
    pub fn n_patients(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Volume used to normalise errors: the death-threshold volume.
    pub fn max_volume(&self) -> f64 {
        volume_from_diameter(self.death_diameter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_steps < 2 || self.n_patients() == 0 {
            return Err(Error::config("tumour model needs at least 2 steps and 1 patient"));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.weight <= 0.0 || s.lower >= s.upper) {
            return Err(Error::config("invalid stage priors"));
        }
        if self.alpha_rho_corr.abs() >= 1.0 || self.rho_std <= 0.0 || self.alpha_std <= 0.0 {
            return Err(Error::config("invalid (α, ρ) prior"));
        }
        Ok(())
    }
}

/// Per-patient pharmacodynamic parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorParams {
    pub group: u32,
    pub initial_volume: f64,
    pub capacity: f64,
    pub rho: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub beta_c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryEnd {
    Horizon,
    Death,
    Recovery,
    /// Volume left the representable range and the trajectory was cut.
    Truncated,
}

#[derive(Clone, Debug)]
pub struct TumorSimulation {
    pub dataset: Dataset,
    pub params: Vec<TumorParams>,
    pub ends: Vec<TrajectoryEnd>,
}

impl TumorSimulation {
    pub fn truncated_count(&self) -> usize {
        self.ends.iter().filter(|e| **e == TrajectoryEnd::Truncated).count()
    }
}

/// One step of the growth recurrence.
pub fn tumor_step(
    volume: f64,
    params: &TumorParams,
    chemo_concentration: f64,
    radio_dose: f64,
    noise: f64,
) -> f64 {
    let growth = params.rho * (params.capacity / volume).ln();
    let chemo = params.beta_c * chemo_concentration;
    let radio = params.alpha_r * radio_dose + params.beta_r * radio_dose * radio_dose;
    (1.0 + growth - chemo - radio + noise) * volume
}

fn truncated_standard_normal(rng: &mut RngStream, lower: f64, upper: f64) -> f64 {
    loop {
        let v = rng.standard_normal();
        if (lower..=upper).contains(&v) {
            return v;
        }
    }
}

fn draw_params(config: &TumorConfig, rng: &mut RngStream) -> TumorParams {
    let total: f64 = config.stages.iter().map(|s| s.weight).sum();
    let mut u = rng.uniform() * total;
    let stage = config
        .stages
        .iter()
        .find(|s| {
            u -= s.weight;
            u < 0.0
        })
        .unwrap_or(&config.stages[config.stages.len() - 1]);
    let lo = (stage.lower.ln() - stage.log_mean) / stage.log_std;
    let hi = (stage.upper.ln() - stage.log_mean) / stage.log_std;
    let diameter = (truncated_standard_normal(rng, lo, hi) * stage.log_std + stage.log_mean).exp();

    // (α_r, ρ) bivariate normal, redrawn until both are positive.
    let corr = config.alpha_rho_corr;
    let (alpha_r, rho) = loop {
        let e1 = rng.standard_normal();
        let e2 = rng.standard_normal();
        let alpha = config.alpha_mean + config.alpha_std * e1;
        let rho = config.rho_mean + config.rho_std * (corr * e1 + (1.0 - corr * corr).sqrt() * e2);
        if alpha > 0.0 && rho > 0.0 {
            break (alpha, rho);
        }
    };
    let beta_c = config.beta_c_mean
        + config.beta_c_std * truncated_standard_normal(rng, -config.beta_c_mean / config.beta_c_std, f64::INFINITY);

    let group = rng.int_inclusive(1, 3) as u32;
    let alpha_r = alpha_r + if group == 1 { config.subgroup_shift * config.alpha_mean } else { 0.0 };
    let beta_c = beta_c + if group == 3 { config.subgroup_shift * config.beta_c_mean } else { 0.0 };
    TumorParams {
        group,
        initial_volume: volume_from_diameter(diameter),
        capacity: volume_from_diameter(config.capacity_diameter),
        rho,
        alpha_r,
        beta_r: alpha_r / config.alpha_beta_ratio,
        beta_c,
    }
}

/// Group label as two indicator columns (groups 2 and 3).
fn group_indicators(group: u32) -> Vec<f64> {
    vec![f64::from(u8::from(group == 2)), f64::from(u8::from(group == 3))]
}

fn simulate_patient(
    config: &TumorConfig,
    params: &TumorParams,
    rng: &mut RngStream,
) -> (PatientTrajectory, TrajectoryEnd) {
    let death_volume = config.max_volume();
    let d_max = config.death_diameter;
    let decay = (-LN_2 / config.chemo_half_life).exp();
    let mut volumes = vec![params.initial_volume];
    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut chemo = 0.0;
    let mut end = TrajectoryEnd::Horizon;
    for t in 0..config.time_steps - 1 {
        let start = t.saturating_sub(config.policy_window);
        let window = &volumes[start..=t];
        let mean_diameter =
            window.iter().map(|&v| diameter_from_volume(v)).sum::<f64>() / window.len() as f64;
        let p_chemo = sigmoid(config.chemo_coeff / d_max * (mean_diameter - d_max / 2.0));
        let p_radio = sigmoid(config.radio_coeff / d_max * (mean_diameter - d_max / 2.0));
        let give_chemo = rng.uniform() < p_chemo;
        let give_radio = rng.uniform() < p_radio;
        chemo = chemo * decay + if give_chemo { config.chemo_dose } else { 0.0 };
        let dose = if give_radio { config.radio_dose } else { 0.0 };
        let noise = rng.normal(0.0, config.noise_std);
        let next = tumor_step(volumes[t], params, chemo, dose, noise);
        if !next.is_finite() || next < 0.0 {
            end = TrajectoryEnd::Truncated;
            break;
        }
        x.push(vec![volumes[t]]);
        a.push(vec![u8::from(give_chemo), u8::from(give_radio)]);
        y.push(next);
        volumes.push(next);
        if next > death_volume {
            end = TrajectoryEnd::Death;
            break;
        }
        if rng.uniform() < (-next * config.cell_density).exp() {
            end = TrajectoryEnd::Recovery;
            break;
        }
    }
    let t_len = y.len();
    let traj = PatientTrajectory {
        x,
        a,
        y,
        z: Some(vec![group_indicators(params.group); t_len]),
        group: Some(params.group),
    };
    (traj, end)
}

/// Simulates `n_train + n_val + n_test` patients. Trajectories that end
/// before producing a single outcome are dropped and reported as truncated.
pub fn simulate_tumor(config: &TumorConfig) -> Result<TumorSimulation> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let results: Vec<(TumorParams, PatientTrajectory, TrajectoryEnd)> = (0..config.n_patients())
        .into_par_iter()
        .map(|i| {
            let mut rng = root.child("patient", i as u64);
            let params = draw_params(config, &mut rng);
            let (traj, end) = simulate_patient(config, &params, &mut rng);
            (params, traj, end)
        })
        .collect();
    let mut params = Vec::with_capacity(results.len());
    let mut patients = Vec::with_capacity(results.len());
    let mut ends = Vec::with_capacity(results.len());
    for (p, traj, end) in results {
        if traj.is_empty() {
            ends.push(TrajectoryEnd::Truncated);
            continue;
        }
        params.push(p);
        patients.push(traj);
        ends.push(end);
    }
    let provenance = Provenance {
        generator: "tumor".into(),
        config_hash: config_hash(config)?,
        seed: config.seed,
    };
    let mut dataset = Dataset::new(patients, 2, 1, provenance)?;
    dataset.config = Some(serde_json::to_value(config)?);
    Ok(TumorSimulation {
        dataset,
        params,
        ends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rho: f64) -> TumorParams {
        TumorParams {
            group: 1,
            initial_volume: 10.0,
            capacity: volume_from_diameter(30.0),
            rho,
            alpha_r: 0.0,
            beta_r: 0.0,
            beta_c: 0.0,
        }
    }

    #[test]
    fn untreated_growth_is_gompertz() {
        let p = params(0.01);
        let v = 5.0;
        let expected = (1.0 + 0.01 * (p.capacity / v).ln()) * v;
        assert_eq!(tumor_step(v, &p, 3.0, 2.0, 0.0), expected);
    }

    #[test]
    fn capacity_is_fixed_point() {
        let p = params(0.01);
        assert_eq!(tumor_step(p.capacity, &p, 0.0, 0.0, 0.0), p.capacity);
    }

    #[test]
    fn diameter_volume_inverse() {
        for d in [0.3, 1.0, 13.0, 30.0] {
            assert!((diameter_from_volume(volume_from_diameter(d)) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn small_simulation() {
        let cfg = TumorConfig {
            n_train: 80,
            n_val: 10,
            n_test: 10,
            seed: 5,
            ..Default::default()
        };
        let sim = simulate_tumor(&cfg).unwrap();
        assert_eq!(sim.ends.len(), 100);
        let ds = &sim.dataset;
        assert_eq!((ds.k, ds.covariate_dim), (2, 1));
        for (p, prm) in ds.patients.iter().zip(&sim.params) {
            assert!((1..=3).contains(&prm.group));
            assert!(p.len() < cfg.time_steps);
            assert!(p.y.iter().all(|&v| v >= 0.0));
            assert_eq!(p.z.as_ref().unwrap()[0].len(), 2);
        }
        let again = simulate_tumor(&cfg).unwrap();
        assert_eq!(again.dataset, sim.dataset);
    }
}
