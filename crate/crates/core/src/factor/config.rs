use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorVariant {
    /// LSTM over the history with one small network per treatment.
    MultitaskRnn,
    /// LSTM over the history with a single joint head emitting all `k` logits.
    PlainRnn,
    /// Per-step feed-forward net on the previous step only, multitask heads.
    MultitaskMlp,
}

impl std::str::FromStr for FactorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multitask-rnn" => Ok(Self::MultitaskRnn),
            "plain-rnn" => Ok(Self::PlainRnn),
            "multitask-mlp" => Ok(Self::MultitaskMlp),
            other => Err(Error::config(format!("unknown factor model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorModelConfig {
    pub variant: FactorVariant,
    /// Dimension of the substitute confounder.
    pub d_z: usize,
    /// LSTM state size, or hidden-layer size for the MLP variant.
    pub hidden_units: usize,
    /// Hidden units of each treatment head.
    pub head_units: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: Option<f64>,
    /// Monte-Carlo draws averaged into the point substitute.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        Self {
            variant: FactorVariant::MultitaskRnn,
            d_z: 1,
            hidden_units: 64,
            head_units: 64,
            dropout: 0.1,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 100,
            max_grad_norm: None,
            mc_samples: 10,
            seed: 0,
        }
    }
}

impl FactorModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.hidden_units == 0 || self.head_units == 0 {
            return Err(Error::config("d_z and layer sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::config(
                "learning rate, batch size and MC samples must be positive",
            ));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::config("max gradient norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Discrete hyperparameter axes for random search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub hidden_units: Vec<usize>,
    pub head_units: Vec<usize>,
    pub dropout: Vec<f64>,
    /// Empty means "no clipping".
    #[serde(default)]
    pub max_grad_norm: Vec<f64>,
}

impl SearchSpace {
    /// Grid for the given variant; the joint-head variant also searches clipping.
    pub fn for_variant(variant: FactorVariant) -> Self {
        Self {
            learning_rate: vec![0.01, 0.001, 0.0001],
            batch_size: vec![64, 128, 256],
            hidden_units: vec![32, 64, 128, 256],
            head_units: vec![32, 64, 128],
            dropout: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            max_grad_norm: if variant == FactorVariant::PlainRnn {
                vec![1.0, 2.0, 4.0]
            } else {
                Vec::new()
            },
        }
    }

    pub fn size(&self) -> usize {
        self.learning_rate.len()
            * self.batch_size.len()
            * self.hidden_units.len()
            * self.head_units.len()
            * self.dropout.len()
            * self.max_grad_norm.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_empty()
            || self.batch_size.is_empty()
            || self.hidden_units.is_empty()
            || self.head_units.is_empty()
            || self.dropout.is_empty()
        {
            return Err(Error::config("every search axis needs at least one value"));
        }
        Ok(())
    }
}
