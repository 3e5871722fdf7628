use serde::{Deserialize, Serialize};

use super::batch::SeqBatch;
use super::config::FactorModelConfig;
use super::model::FactorModel;
use crate::data::{Dataset, PatientTrajectory};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, derive_seed, AdamConfig, AdamState, RngStream};

/// Rows per chunk when a whole dataset is pushed through the model.
pub(crate) const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Per-column mean and standard deviation (population); zero spread maps to one.
pub fn covariate_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let dx = ds.covariate_dim;
    let mut mean = vec![0.0; dx];
    let mut sq = vec![0.0; dx];
    let n = ds.num_steps().max(1) as f64;
    for row in ds.patients.iter().flat_map(|p| &p.x) {
        for j in 0..dx {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for row in ds.patients.iter().flat_map(|p| &p.x) {
        for j in 0..dx {
            sq[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl FactorModel {
    pub(crate) fn batch_of(&self, patients: &[&PatientTrajectory]) -> SeqBatch {
        SeqBatch::new(patients, &self.x_mean, &self.x_std, self.k)
    }

    /// Mean cross-entropy on a dataset with dropout switched off.
    pub fn evaluate_loss(&self, ds: &Dataset) -> f64 {
        let refs: Vec<&PatientTrajectory> = ds.patients.iter().collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for chunk in refs.chunks(EVAL_CHUNK) {
            let batch = self.batch_of(chunk);
            let steps = (batch.num_steps() * self.k) as f64;
            sum += self.loss(&self.params, &batch, None) * steps;
            count += steps;
        }
        sum / count
    }
}

fn check_inputs(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("factor model needs non-empty train and validation sets"));
    }
    if train.k != val.k || train.covariate_dim != val.covariate_dim {
        return Err(Error::Shape {
            expected: vec![train.k, train.covariate_dim],
            actual: vec![val.k, val.covariate_dim],
        });
    }
    if train.patients.iter().chain(&val.patients).any(PatientTrajectory::is_empty) {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    Ok(())
}

/// Fits the factor model with Adam for the configured number of epochs and
/// returns the parameters from the epoch with the lowest validation loss.
pub fn train_factor_model(
    train: &Dataset,
    val: &Dataset,
    config: &FactorModelConfig,
) -> Result<(FactorModel, TrainingLog)> {
    check_inputs(train, val)?;
    let (mean, std) = covariate_stats(train);
    let mut model = FactorModel::new(config.clone(), train.covariate_dim, train.k, mean, std)?;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), &model.params);
    let root = RngStream::new(config.seed);
    let mut log = TrainingLog {
        best_val_loss: f64::INFINITY,
        ..TrainingLog::default()
    };
    let mut best = model.params.clone();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.child("shuffle", epoch as u64).shuffle(&mut order);
        let mask_root = derive_seed(config.seed, "dropout", epoch as u64);
        let mut loss_sum = 0.0;
        let mut steps_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PatientTrajectory> = chunk.iter().map(|&i| &train.patients[i]).collect();
            let batch = model.batch_of(&refs);
            let masks = (config.dropout > 0.0).then(|| {
                let seeds: Vec<u64> = batch
                    .order
                    .iter()
                    .map(|&r| derive_seed(mask_root, "patient", chunk[r] as u64))
                    .collect();
                model.draw_masks(&batch, &seeds)
            });
            let (loss, mut grads) = model.loss_and_grad(&model.params, &batch, masks.as_ref());
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            if let Some(max) = config.max_grad_norm {
                grads.clip_global_norm(max);
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            let steps = batch.num_steps() as f64;
            loss_sum += loss * steps;
            steps_sum += steps;
        }
        let val_loss = model.evaluate_loss(val);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.params.clone();
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps_sum,
            val_loss,
        });
    }
    if config.epochs > 0 {
        model.params = best;
    } else {
        log.best_val_loss = model.evaluate_loss(val);
    }
    Ok((model, log))
}
