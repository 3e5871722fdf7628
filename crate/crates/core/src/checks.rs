//! Temporal predictive checks for a fitted factor model.
//!
//! At each step the statistic is the expected log-likelihood of the assigned
//! treatments under the model, averaged over held-out patients:
//! `T(a_t) = mean_i Σ_j mean_s [a log p_s + (1−a) log(1−p_s)]`, with `s`
//! running over dropout draws of the substitutes. The p-value is the share of
//! replicas whose statistic is strictly below the held-out one.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::factor::{sample_treatment_replicas, FactorModel, Track};
use crate::numerics::derive_seed;

const PROB_FLOOR: f64 = 1e-12;

/// Expected log-likelihood terms for one (patient, step, treatment).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LogLik {
    one: f64,
    zero: f64,
}

/// Per-(patient, step, treatment) expected log-likelihoods, averaged over draws.
#[derive(Clone, Debug)]
pub struct LikelihoodTable {
    terms: Vec<Vec<Vec<LogLik>>>,
    /// Whether any probability had to be clamped away from 0 or 1.
    pub clamped: bool,
}

impl LikelihoodTable {
    /// `draws[s][i][t][j]` are predicted probabilities.
    pub fn new(draws: &[Vec<Track>]) -> Result<Self> {
        let first = draws.first().ok_or_else(|| Error::config("need at least one probability draw"))?;
        let s = draws.len() as f64;
        let mut clamped = false;
        let mut terms: Vec<Vec<Vec<LogLik>>> = first
            .iter()
            .map(|p| p.iter().map(|row| vec![LogLik::default(); row.len()]).collect())
            .collect();
        for draw in draws {
            for (tp, p) in terms.iter_mut().zip(draw) {
                for (tr, row) in tp.iter_mut().zip(p) {
                    for (cell, &q) in tr.iter_mut().zip(row) {
                        let qc = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        clamped |= qc != q;
                        cell.one += qc.ln() / s;
                        cell.zero += (1.0 - qc).ln() / s;
                    }
                }
            }
        }
        Ok(Self { terms, clamped })
    }

    fn patient_step(&self, i: usize, t: usize, a: &[u8]) -> f64 {
        self.terms[i][t]
            .iter()
            .zip(a)
            .map(|(c, &v)| if v == 1 { c.one } else { c.zero })
            .sum()
    }

    /// Statistic at step `t` over patients active at `t`; `None` if nobody is.
    pub fn statistic(&self, t: usize, treatments: &[Vec<Vec<u8>>]) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, a) in treatments.iter().enumerate() {
            if let Some(at) = a.get(t) {
                sum += self.patient_step(i, t, at);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Statistic for one step from explicit probabilities (`probs[s][i]` is the
/// `k`-vector for patient `i` under draw `s`). Returns the value and whether
/// clamping was needed.
pub fn test_statistic(probs: &[Vec<Vec<f64>>], a: &[Vec<u8>]) -> (f64, bool) {
    let s = probs.len() as f64;
    let n = a.len() as f64;
    let mut clamped = false;
    let mut total = 0.0;
    for draw in probs {
        for (p, ai) in draw.iter().zip(a) {
            for (&q, &v) in p.iter().zip(ai) {
                let qc = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                clamped |= qc != q;
                total += if v == 1 { qc.ln() } else { (1.0 - qc).ln() };
            }
        }
    }
    (total / (s * n), clamped)
}

/// `(1/M) Σ_m 1{T_rep,m < T_val}`.
pub fn p_value(replica_stats: &[f64], observed: f64) -> f64 {
    let below = replica_stats.iter().filter(|&&v| v < observed).count();
    below as f64 / replica_stats.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepCheck {
    pub t: usize,
    pub p_value: f64,
    pub n_active: usize,
    pub observed: f64,
    pub replica_stats: Vec<f64>,
    /// Mean and standard error across patients of per-patient p-values.
    pub patient_p_mean: f64,
    pub patient_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub m: usize,
    pub mc_samples: usize,
    pub timesteps: Vec<TimestepCheck>,
    pub clamped: bool,
}

impl CheckReport {
    pub fn mean_p_value(&self) -> f64 {
        mean(self.timesteps.iter().map(|c| c.p_value))
    }

    /// Mean p-value over the last `ceil(n/3)` checked steps.
    pub fn final_third_mean(&self) -> f64 {
        let n = self.timesteps.len();
        let start = n - n.div_ceil(3);
        mean(self.timesteps[start..].iter().map(|c| c.p_value))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Builds the per-step report from a likelihood table, held-out treatments
/// and replica treatments (`replicas[m][i][t][j]`). Steps with fewer than
/// `min_active` patients are skipped.
pub fn check_from_replicas(
    table: &LikelihoodTable,
    observed: &[Vec<Vec<u8>>],
    replicas: &[Vec<Vec<Vec<u8>>>],
    min_active: usize,
    mc_samples: usize,
) -> Result<CheckReport> {
    if replicas.len() < 2 {
        return Err(Error::config("predictive checks need at least two replicas"));
    }
    let t_max = observed.iter().map(Vec::len).max().unwrap_or(0);
    let mut timesteps = Vec::new();
    for t in 0..t_max {
        let active: Vec<usize> = (0..observed.len()).filter(|&i| observed[i].len() > t).collect();
        if active.len() < min_active.max(1) {
            continue;
        }
        let obs = table.statistic(t, observed).expect("active patients exist");
        let reps: Vec<f64> = replicas
            .iter()
            .map(|r| table.statistic(t, r).expect("replicas share lengths"))
            .collect();
        let patient_p: Vec<f64> = active
            .iter()
            .map(|&i| {
                let o = table.patient_step(i, t, &observed[i][t]);
                let below = replicas
                    .iter()
                    .filter(|r| table.patient_step(i, t, &r[i][t]) < o)
                    .count();
                below as f64 / replicas.len() as f64
            })
            .collect();
        let pm = mean(patient_p.iter().copied());
        let var = if patient_p.len() > 1 {
            patient_p.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (patient_p.len() - 1) as f64
        } else {
            0.0
        };
        timesteps.push(TimestepCheck {
            t,
            p_value: p_value(&reps, obs),
            n_active: active.len(),
            observed: obs,
            replica_stats: reps,
            patient_p_mean: pm,
            patient_stderr: (var / patient_p.len() as f64).sqrt(),
        });
    }
    Ok(CheckReport {
        m: replicas.len(),
        mc_samples,
        timesteps,
        clamped: table.clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub replicas: usize,
    pub mc_samples: usize,
    /// Steps with fewer active held-out patients are not reported.
    pub min_active: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            replicas: 50,
            mc_samples: 10,
            min_active: 1,
            seed: 0,
        }
    }
}

/// Per-step predictive p-values of `model` on held-out data.
pub fn predictive_p_values(model: &FactorModel, held_out: &Dataset, config: &CheckConfig) -> Result<CheckReport> {
    if config.replicas < 2 || config.mc_samples == 0 {
        return Err(Error::config("need M >= 2 replicas and at least one MC draw"));
    }
    let draws: Vec<Vec<Track>> = (0..config.mc_samples as u64)
        .map(|s| {
            model
                .forward_dataset(&held_out.patients, Some(derive_seed(config.seed, "check-mc", s)))
                .probs
        })
        .collect();
    let table = LikelihoodTable::new(&draws)?;
    let replicas = sample_treatment_replicas(
        model,
        held_out,
        config.replicas,
        derive_seed(config.seed, "check-replicas", 0),
    )?;
    let observed: Vec<Vec<Vec<u8>>> = held_out.patients.iter().map(|p| p.a.clone()).collect();
    check_from_replicas(&table, &observed, &replicas, config.min_active, config.mc_samples)
}
