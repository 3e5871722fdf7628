//! Recurrent marginal structural network.
//!
//! Two recurrent propensity networks estimate `f(a_t | ā_{t−1})` and
//! `f(a_t | x̄_t, z̄_t, ā_{t−1})`; their ratio gives stabilised weights for a
//! third recurrent network that predicts `y_t` from `(x̄_t, z̄_t, ā_t)` under
//! a weighted squared-error loss.

mod net;


use std::path::Path;

use serde::{Deserialize, Serialize};

pub use net::{train_network, NetworkConfig, OutputKind, SeqNet, Sequences, StepBatch, StepMasks};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::factor::TrainingLog;
use crate::msm::weights_from_probs;
use crate::numerics::{derive_seed, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Running product of stabilised weights, truncated at percentiles.
    #[default]
    Cumulative,
    /// Per-step stabilised weight only.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsnConfig {
    pub numerator: NetworkConfig,
    pub denominator: NetworkConfig,
    pub prediction: NetworkConfig,
    pub weights: WeightMode,
    pub truncation: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for RmsnConfig {
    fn default() -> Self {
        let net = |dropout, state_size, batch_size, learning_rate, max_grad_norm| NetworkConfig {
            dropout,
            state_size,
            batch_size,
            learning_rate,
            max_grad_norm,
            epochs: 100,
        };
        Self {
            numerator: net(0.1, 6, 128, 0.01, 2.0),
            denominator: net(0.1, 16, 64, 0.01, 1.0),
            prediction: net(0.1, 16, 128, 0.01, 0.5),
            weights: WeightMode::Cumulative,
            truncation: Some((0.01, 0.99)),
            seed: 0,
        }
    }
}

impl RmsnConfig {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.numerator.epochs = epochs;
        self.denominator.epochs = epochs;
        self.prediction.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.numerator.validate()?;
        self.denominator.validate()?;
        self.prediction.validate()?;
        if let Some((lo, hi)) = self.truncation {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::config("truncation percentiles must satisfy 0 ≤ lo ≤ hi ≤ 1"));
            }
        }
        Ok(())
    }
}

/// Standardisation statistics from the fitting set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for row in rows {
        n += 1.0;
        for j in 0..dim {
            sum[j] += row[j];
            sq[j] += row[j] * row[j];
        }
    }
    let n = f64::max(n, 1.0);
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let v = (s / n - m * m).max(0.0).sqrt();
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Scaler {
    pub fn fit(ds: &Dataset) -> Self {
        let dz = z_dim(ds);
        let (x_mean, x_std) = moments(ds.patients.iter().flat_map(|p| p.x.iter().map(Vec::as_slice)), ds.covariate_dim);
        let (z_mean, z_std) = moments(
            ds.patients.iter().filter_map(|p| p.z.as_ref()).flat_map(|z| z.iter().map(Vec::as_slice)),
            dz,
        );
        let ys: Vec<f64> = ds.patients.iter().flat_map(|p| p.y.iter().copied()).collect();
        let (y_mean, y_std) = moments(ys.iter().map(std::slice::from_ref), 1);
        Self {
            x_mean,
            x_std,
            z_mean,
            z_std,
            y_mean: y_mean[0],
            y_std: y_std[0],
        }
    }
}

fn z_dim(ds: &Dataset) -> usize {
    if ds.has_oracle_z() {
        ds.oracle_z_dim().unwrap_or(0)
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Numerator,
    Denominator,
    Prediction,
}

fn build_sequences(ds: &Dataset, scaler: &Scaler, role: Role, weights: Option<&[f64]>) -> Sequences {
    let (k, dx) = (ds.k, ds.covariate_dim);
    let dz = scaler.z_mean.len();
    let input_dim = match role {
        Role::Numerator => k,
        _ => dx + dz + k,
    };
    let output_dim = if role == Role::Prediction { 1 } else { k };
    let mut seqs = Sequences {
        input_dim,
        output_dim,
        ..Sequences::default()
    };
    let mut offset = 0;
    for p in &ds.patients {
        let len = p.len();
        let mut inputs = Vec::with_capacity(len * input_dim);
        let mut targets = Vec::with_capacity(len * output_dim);
        for t in 0..len {
            if role != Role::Numerator {
                inputs.extend((0..dx).map(|j| (p.x[t][j] - scaler.x_mean[j]) / scaler.x_std[j]));
                if let Some(z) = p.z.as_ref().filter(|_| dz > 0) {
                    inputs.extend((0..dz).map(|c| (z[t][c] - scaler.z_mean[c]) / scaler.z_std[c]));
                }
            }
            match role {
                Role::Prediction => inputs.extend(p.a[t].iter().map(|&v| f64::from(v))),
                _ if t == 0 => inputs.extend(std::iter::repeat(0.0).take(k)),
                _ => inputs.extend(p.a[t - 1].iter().map(|&v| f64::from(v))),
            }
            match role {
                Role::Prediction => targets.push((p.y[t] - scaler.y_mean) / scaler.y_std),
                _ => targets.extend(p.a[t].iter().map(|&v| f64::from(v))),
            }
        }
        seqs.inputs.push(inputs);
        seqs.targets.push(targets);
        seqs.weights.push(match weights {
            Some(w) => w[offset..offset + len].to_vec(),
            None => vec![1.0; len],
        });
        offset += len;
    }
    seqs
}

#[derive(Clone, Debug)]
pub struct RmsnModel {
    pub config: RmsnConfig,
    pub scaler: Scaler,
    pub numerator: SeqNet,
    pub denominator: SeqNet,
    pub prediction: SeqNet,
    pub logs: [TrainingLog; 3],
    /// Mean untruncated weight on the fitting set.
    pub mean_weight: f64,
}

fn flatten_probs(per_seq: Vec<Vec<f64>>, k: usize) -> Vec<Vec<f64>> {
    per_seq.into_iter().flat_map(|s| s.chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>()).collect()
}

impl RmsnModel {
    /// Weights for every (patient, step) of `ds`, flattened patient-major.
    pub fn weights(&self, ds: &Dataset) -> Vec<f64> {
        let num = flatten_probs(self.numerator.predict(&build_sequences(ds, &self.scaler, Role::Numerator, None)), ds.k);
        let den = flatten_probs(self.denominator.predict(&build_sequences(ds, &self.scaler, Role::Denominator, None)), ds.k);
        let w = weights_from_probs(ds, &num, &den, self.config.truncation);
        match self.config.weights {
            WeightMode::Cumulative => w.truncated,
            WeightMode::PerStep => w.stabilized,
        }
    }
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.k != b.k || a.covariate_dim != b.covariate_dim || z_dim(a) != z_dim(b) {
        return Err(Error::Shape {
            expected: vec![a.k, a.covariate_dim, z_dim(a)],
            actual: vec![b.k, b.covariate_dim, z_dim(b)],
        });
    }
    Ok(())
}

/// Fits the three networks on `fit_on`, selecting epochs on `val`.
pub fn fit_rmsn(fit_on: &Dataset, val: &Dataset, cfg: &RmsnConfig) -> Result<RmsnModel> {
    cfg.validate()?;
    check_compatible(fit_on, val)?;
    let scaler = Scaler::fit(fit_on);
    let seqs = |ds: &Dataset, role| build_sequences(ds, &scaler, role, None);
    let (k, dx, dz) = (fit_on.k, fit_on.covariate_dim, scaler.z_mean.len());

    let c = &cfg.numerator;
    let mut numerator = SeqNet::new(OutputKind::Sigmoid, k, k, c.state_size, c.dropout, derive_seed(cfg.seed, "numerator", 0));
    let log_num = train_network(
        &mut numerator,
        &seqs(fit_on, Role::Numerator),
        &seqs(val, Role::Numerator),
        c,
        derive_seed(cfg.seed, "numerator", 1),
    )?;
    let c = &cfg.denominator;
    let mut denominator =
        SeqNet::new(OutputKind::Sigmoid, dx + dz + k, k, c.state_size, c.dropout, derive_seed(cfg.seed, "denominator", 0));
    let log_den = train_network(
        &mut denominator,
        &seqs(fit_on, Role::Denominator),
        &seqs(val, Role::Denominator),
        c,
        derive_seed(cfg.seed, "denominator", 1),
    )?;
    let c = &cfg.prediction;
    let prediction =
        SeqNet::new(OutputKind::Linear, dx + dz + k, 1, c.state_size, c.dropout, derive_seed(cfg.seed, "prediction", 0));
    let mut model = RmsnModel {
        config: cfg.clone(),
        scaler: scaler.clone(),
        numerator,
        denominator,
        prediction,
        logs: [log_num, log_den, TrainingLog::default()],
        mean_weight: f64::NAN,
    };
    let w_fit = model.weights(fit_on);
    let w_val = model.weights(val);
    let num = flatten_probs(model.numerator.predict(&seqs(fit_on, Role::Numerator)), k);
    let den = flatten_probs(model.denominator.predict(&seqs(fit_on, Role::Denominator)), k);
    let raw = weights_from_probs(fit_on, &num, &den, None);
    model.mean_weight = raw.cumulative.iter().sum::<f64>() / raw.cumulative.len().max(1) as f64;
    let train_seqs = build_sequences(fit_on, &model.scaler, Role::Prediction, Some(&w_fit));
    let val_seqs = build_sequences(val, &model.scaler, Role::Prediction, Some(&w_val));
    model.logs[2] = train_network(&mut model.prediction, &train_seqs, &val_seqs, c, derive_seed(cfg.seed, "prediction", 1))?;
    Ok(model)
}

/// One-step-ahead predictions on the original outcome scale, flattened
/// patient-major.
pub fn predict_rmsn(model: &RmsnModel, ds: &Dataset) -> Result<Vec<f64>> {
    let expected = model.prediction.input_dim();
    let actual = ds.covariate_dim + z_dim(ds) + ds.k;
    if expected != actual || z_dim(ds) != model.scaler.z_mean.len() {
        return Err(Error::Shape {
            expected: vec![expected],
            actual: vec![actual],
        });
    }
    let seqs = build_sequences(ds, &model.scaler, Role::Prediction, None);
    Ok(model
        .prediction
        .predict(&seqs)
        .into_iter()
        .flatten()
        .map(|v| v * model.scaler.y_std + model.scaler.y_mean)
        .collect())
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: RmsnConfig,
    scaler: Scaler,
    numerator: ParamSet,
    denominator: ParamSet,
    prediction: ParamSet,
    logs: [TrainingLog; 3],
    mean_weight: f64,
}

pub fn save_rmsn(model: &RmsnModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        scaler: model.scaler.clone(),
        numerator: model.numerator.params.clone(),
        denominator: model.denominator.params.clone(),
        prediction: model.prediction.params.clone(),
        logs: model.logs.clone(),
        mean_weight: model.mean_weight,
    };
    std::fs::write(path, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_rmsn(path: &Path) -> Result<RmsnModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {}", ckpt.format_version)));
    }
    let cfg = ckpt.config;
    Ok(RmsnModel {
        numerator: SeqNet::from_params(OutputKind::Sigmoid, cfg.numerator.dropout, ckpt.numerator)?,
        denominator: SeqNet::from_params(OutputKind::Sigmoid, cfg.denominator.dropout, ckpt.denominator)?,
        prediction: SeqNet::from_params(OutputKind::Linear, cfg.prediction.dropout, ckpt.prediction)?,
        config: cfg,
        scaler: ckpt.scaler,
        logs: ckpt.logs,
        mean_weight: ckpt.mean_weight,
    })
}
