use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{FactorModelConfig, SearchSpace};
use super::model::FactorModel;
use super::train::{train_factor_model, TrainingLog};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: FactorModelConfig,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: FactorModelConfig,
    pub model: FactorModel,
    pub log: TrainingLog,
    pub trials: Vec<Trial>,
}

fn pick<T: Copy>(rng: &mut RngStream, values: &[T]) -> T {
    values[rng.int_inclusive(0, values.len() - 1)]
}

/// Up to `iterations` distinct configurations drawn uniformly from `space`.
pub fn sample_configs(
    base: &FactorModelConfig,
    space: &SearchSpace,
    iterations: usize,
    seed: u64,
) -> Result<Vec<FactorModelConfig>> {
    space.validate()?;
    let target = iterations.min(space.size());
    let mut rng = RngStream::new(seed).child("search", 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(target);
    while out.len() < target {
        let mut c = base.clone();
        c.learning_rate = pick(&mut rng, &space.learning_rate);
        c.batch_size = pick(&mut rng, &space.batch_size);
        c.hidden_units = pick(&mut rng, &space.hidden_units);
        c.head_units = pick(&mut rng, &space.head_units);
        c.dropout = pick(&mut rng, &space.dropout);
        c.max_grad_norm = if space.max_grad_norm.is_empty() {
            base.max_grad_norm
        } else {
            Some(pick(&mut rng, &space.max_grad_norm))
        };
        let key = serde_json::to_string(&c)?;
        if seen.insert(key) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Random search over `space`, scoring each configuration by its best
/// validation loss. Trials run in parallel; diverged trials are logged.
pub fn random_search(
    train: &Dataset,
    val: &Dataset,
    base: &FactorModelConfig,
    space: &SearchSpace,
    iterations: usize,
    seed: u64,
) -> Result<SearchResult> {
    let configs = sample_configs(base, space, iterations, seed)?;
    let fits: Vec<Result<(FactorModel, TrainingLog)>> = configs
        .par_iter()
        .map(|c| train_factor_model(train, val, c))
        .collect();
    let mut trials = Vec::with_capacity(configs.len());
    let mut best: Option<(FactorModel, TrainingLog)> = None;
    for (config, fit) in configs.into_iter().zip(fits) {
        match fit {
            Ok((model, log)) => {
                trials.push(Trial {
                    config,
                    val_loss: Some(log.best_val_loss),
                    error: None,
                });
                if best.as_ref().map_or(true, |(_, b)| log.best_val_loss < b.best_val_loss) {
                    best = Some((model, log));
                }
            }
            Err(e) => trials.push(Trial {
                config,
                val_loss: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (model, log) = best.ok_or(Error::SearchFailed(trials.len()))?;
    Ok(SearchResult {
        best: model.config.clone(),
        model,
        log,
        trials,
    })
}
