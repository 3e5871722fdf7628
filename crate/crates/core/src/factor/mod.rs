//! Recurrent factor model over assigned treatments.
//!
//! The model infers a substitute confounder `z_t` from the history of
//! covariates and treatments such that the `k` treatments at step `t` are
//! conditionally independent given `(x_t, z_t)`. Dropout kept on at
//! inference turns one trained network into a sampler over substitutes.

mod batch;
mod config;
mod infer;
mod model;
mod search;
mod train;

#[cfg(test)]
mod tests;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{BatchMasks, SeqBatch};
pub use config::{FactorModelConfig, FactorVariant, SearchSpace};
pub use infer::{
    forward_infer_z, infer_substitutes, predict_treatment_probs, sample_treatment_replicas, ForwardPass,
    SubstituteSamples, Track,
};
pub use model::FactorModel;
pub use search::{random_search, sample_configs, SearchResult, Trial};
pub use train::{covariate_stats, train_factor_model, EpochLog, TrainingLog};

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: FactorModelConfig,
    covariate_dim: usize,
    k: usize,
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    params: ParamSet,
    log: TrainingLog,
}

pub fn save_checkpoint(model: &FactorModel, log: &TrainingLog, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        covariate_dim: model.covariate_dim,
        k: model.k,
        x_mean: model.x_mean.clone(),
        x_std: model.x_std.clone(),
        params: model.params.clone(),
        log: log.clone(),
    };
    let bytes = serde_json::to_vec(&ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(FactorModel, TrainingLog)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    let model = FactorModel::from_parts(
        ckpt.config,
        ckpt.covariate_dim,
        ckpt.k,
        ckpt.x_mean,
        ckpt.x_std,
        ckpt.params,
    )?;
    Ok((model, ckpt.log))
}
