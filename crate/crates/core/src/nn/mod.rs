//! Hand-written forward and backward passes for the fixed topologies used by
//! the factor model and the recurrent outcome networks. All layers operate on
//! row-major batches (`batch × features`) and read their weights from a
//! [`ParamSet`](crate::numerics::ParamSet) by index.

mod dense;
mod lstm;

pub use dense::Dense;
pub use lstm::{Lstm, LstmStep};

use crate::numerics::{sigmoid, softplus, RngStream};

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(rng: &mut RngStream, len: usize, rate: f64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

/// Binary cross-entropy on a logit and its derivative with respect to the logit.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    (softplus(logit) - target * logit, sigmoid(logit) - target)
}

pub(crate) fn uniform_init(rng: &mut RngStream, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect()
}
