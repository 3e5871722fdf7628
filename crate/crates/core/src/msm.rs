//! Marginal structural model for one-step-ahead outcomes.
//!
//! Propensities come from per-treatment logistic regressions: the numerator
//! sees only cumulative treatment counts, the denominator adds current and
//! lagged covariates and confounders. Stabilised weights are cumulated over
//! time, truncated at percentiles and used in a weighted least-squares fit
//! of the outcome.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{linalg::cholesky_solve, log_sigmoid, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    /// Intercept and counts `Σ_{s<t} a_{s,j}`.
    Numerator,
    /// Numerator features plus `x_t, x_{t−1}, z_t, z_{t−1}`.
    Denominator,
    /// Intercept, counts `Σ_{s≤t} a_{s,j}`, `x_t, x_{t−1}, z_t, z_{t−1}`.
    Outcome,
}

/// Dense row-major design matrix, one row per active (patient, step).
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl Design {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Builds the design for `set`. Lagged terms at `t = 0` are zero. Confounder
/// columns appear when every patient carries `z`.
pub fn build_features(ds: &Dataset, set: FeatureSet) -> Design {
    let (k, dx) = (ds.k, ds.covariate_dim);
    let dz = if ds.has_oracle_z() { ds.oracle_z_dim().unwrap_or(0) } else { 0 };
    let mut names = vec!["intercept".to_string()];
    names.extend((0..k).map(|j| format!("cum_a{j}")));
    if set != FeatureSet::Numerator {
        names.extend((0..dx).map(|j| format!("x{j}")));
        names.extend((0..dx).map(|j| format!("x{j}_lag")));
        names.extend((0..dz).map(|c| format!("z{c}")));
        names.extend((0..dz).map(|c| format!("z{c}_lag")));
    }
    let cols = names.len();
    let mut values = Vec::with_capacity(ds.num_steps() * cols);
    for p in &ds.patients {
        let mut cum = vec![0.0; k];
        for t in 0..p.len() {
            if set == FeatureSet::Outcome {
                for (c, &a) in cum.iter_mut().zip(&p.a[t]) {
                    *c += f64::from(a);
                }
            }
            values.push(1.0);
            values.extend_from_slice(&cum);
            if set != FeatureSet::Numerator {
                values.extend_from_slice(&p.x[t]);
                if t > 0 {
                    values.extend_from_slice(&p.x[t - 1]);
                } else {
                    values.extend(std::iter::repeat(0.0).take(dx));
                }
                if dz > 0 {
                    let z = p.z.as_ref().expect("checked by has_oracle_z");
                    values.extend_from_slice(&z[t]);
                    if t > 0 {
                        values.extend_from_slice(&z[t - 1]);
                    } else {
                        values.extend(std::iter::repeat(0.0).take(dz));
                    }
                }
            }
            if set != FeatureSet::Outcome {
                for (c, &a) in cum.iter_mut().zip(&p.a[t]) {
                    *c += f64::from(a);
                }
            }
        }
    }
    Design {
        rows: ds.num_steps(),
        cols,
        values,
        names,
    }
}

/// Mean negative log-likelihood plus `ridge/2 · ‖w_{1..}‖²` and its gradient.
/// Column 0 is the (unpenalised) intercept.
pub fn logistic_loss_grad(w: &[f64], design: &Design, y: &[f64], ridge: f64) -> (f64, Vec<f64>) {
    let n = design.rows as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; design.cols];
    for r in 0..design.rows {
        let row = design.row(r);
        let eta: f64 = row.iter().zip(w).map(|(x, b)| x * b).sum();
        loss -= y[r] * log_sigmoid(eta) + (1.0 - y[r]) * log_sigmoid(-eta);
        let resid = sigmoid(eta) - y[r];
        for (g, x) in grad.iter_mut().zip(row) {
            *g += resid * x;
        }
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for c in 1..design.cols {
        loss += 0.5 * ridge * w[c] * w[c];
        grad[c] += ridge * w[c];
    }
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Coefficients on the original feature scale; index 0 is the intercept.
    pub coef: Vec<f64>,
    pub ridge: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the unpenalised fit diverged and the ridge was applied.
    pub separation: bool,
}

impl LogisticModel {
    pub fn prob(&self, row: &[f64]) -> f64 {
        sigmoid(row.iter().zip(&self.coef).map(|(x, b)| x * b).sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Ridge applied when separation is detected.
    pub separation_ridge: f64,
    /// Standardised coefficient magnitude treated as divergence.
    pub separation_bound: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-6,
            separation_ridge: 1e-4,
            separation_bound: 25.0,
        }
    }
}

/// Column means and spreads; the intercept column is left as is.
fn standardize(design: &Design) -> (Design, Vec<f64>, Vec<f64>) {
    let n = design.rows.max(1) as f64;
    let mut mean = vec![0.0; design.cols];
    let mut scale = vec![1.0; design.cols];
    for c in 1..design.cols {
        let m = (0..design.rows).map(|r| design.row(r)[c]).sum::<f64>() / n;
        let v = (0..design.rows).map(|r| (design.row(r)[c] - m).powi(2)).sum::<f64>() / n;
        mean[c] = m;
        scale[c] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let mut out = design.clone();
    for r in 0..design.rows {
        for c in 1..design.cols {
            let v = &mut out.values[r * design.cols + c];
            *v = (*v - mean[c]) / scale[c];
        }
    }
    (out, mean, scale)
}

/// Gradient and Hessian of the mean penalised loss.
fn logistic_hessian(w: &[f64], design: &Design, y: &[f64], ridge: f64) -> (Vec<f64>, Vec<f64>) {
    let p = design.cols;
    let n = design.rows as f64;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    for r in 0..design.rows {
        let row = design.row(r);
        let prob = sigmoid(row.iter().zip(w).map(|(x, b)| x * b).sum());
        let resid = prob - y[r];
        let curv = prob * (1.0 - prob);
        for i in 0..p {
            grad[i] += resid * row[i];
            let ci = curv * row[i];
            for j in 0..=i {
                hess[i * p + j] += ci * row[j];
            }
        }
    }
    for i in 0..p {
        grad[i] /= n;
        for j in 0..=i {
            hess[i * p + j] /= n;
            hess[j * p + i] = hess[i * p + j];
        }
        if i > 0 {
            grad[i] += ridge * w[i];
            hess[i * p + i] += ridge;
        }
    }
    (grad, hess)
}

/// Newton directions with Armijo backtracking on the penalised loss.
fn descend(design: &Design, y: &[f64], ridge: f64, cfg: &LogisticConfig) -> (Vec<f64>, bool, usize) {
    let p = design.cols;
    let mut w = vec![0.0; p];
    let mut loss = logistic_loss_grad(&w, design, y, ridge).0;
    for iter in 0..cfg.max_iter {
        let (grad, mut hess) = logistic_hessian(&w, design, y, ridge);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < cfg.grad_tol {
            return (w, true, iter);
        }
        if w.iter().skip(1).any(|v| v.abs() > 4.0 * cfg.separation_bound) {
            return (w, false, iter);
        }
        let jitter = 1e-10 * (0..p).map(|i| hess[i * p + i]).sum::<f64>() / p as f64;
        for i in 0..p {
            hess[i * p + i] += jitter;
        }
        let dir: Vec<f64> = match cholesky_solve(&hess, &grad) {
            Ok(d) if d.iter().all(|v| v.is_finite()) => d.iter().map(|v| -v).collect(),
            _ => grad.iter().map(|g| -g).collect(),
        };
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let l = logistic_loss_grad(&cand, design, y, ridge).0;
            if l <= loss + 1e-4 * step * slope || step < 1e-10 {
                w = cand;
                loss = l;
                break;
            }
            step *= 0.5;
        }
    }
    let gnorm = logistic_loss_grad(&w, design, y, ridge).1.iter().map(|g| g * g).sum::<f64>().sqrt();
    (w, gnorm < cfg.grad_tol, cfg.max_iter)
}

/// Fits `P(y = 1 | row)`; `design` must include the intercept column first.
pub fn fit_logistic(design: &Design, y: &[f64], cfg: &LogisticConfig) -> Result<LogisticModel> {
    if design.rows == 0 || y.len() != design.rows {
        return Err(Error::InvalidInput("logistic regression needs matching, non-empty rows".into()));
    }
    let (std_design, mean, scale) = standardize(design);
    let (mut w, mut converged, mut iterations) = descend(&std_design, y, 0.0, cfg);
    let diverged = w.iter().skip(1).any(|v| v.abs() > cfg.separation_bound);
    let mut ridge = 0.0;
    if diverged {
        ridge = cfg.separation_ridge;
        (w, converged, iterations) = descend(&std_design, y, ridge, cfg);
    }
    let mut coef = vec![0.0; design.cols];
    coef[0] = w[0];
    for c in 1..design.cols {
        coef[c] = w[c] / scale[c];
        coef[0] -= w[c] * mean[c] / scale[c];
    }
    Ok(LogisticModel {
        coef,
        ridge,
        converged,
        iterations,
        separation: diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModels {
    pub numerator: Vec<LogisticModel>,
    pub denominator: Vec<LogisticModel>,
}

impl PropensityModels {
    pub fn any_separation(&self) -> bool {
        self.numerator.iter().chain(&self.denominator).any(|m| m.separation)
    }
}

fn treatment_column(ds: &Dataset, j: usize) -> Vec<f64> {
    ds.patients
        .iter()
        .flat_map(|p| p.a.iter().map(move |a| f64::from(a[j])))
        .collect()
}

pub fn fit_propensity_models(ds: &Dataset, cfg: &LogisticConfig) -> Result<PropensityModels> {
    let num = build_features(ds, FeatureSet::Numerator);
    let den = build_features(ds, FeatureSet::Denominator);
    let mut numerator = Vec::with_capacity(ds.k);
    let mut denominator = Vec::with_capacity(ds.k);
    for j in 0..ds.k {
        let y = treatment_column(ds, j);
        numerator.push(fit_logistic(&num, &y, cfg)?);
        denominator.push(fit_logistic(&den, &y, cfg)?);
    }
    Ok(PropensityModels { numerator, denominator })
}

/// Per-(patient, step) propensity quantities, flattened in patient-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityWeights {
    /// `Π_j f(a_tj | past treatments)`.
    pub numerator: Vec<f64>,
    /// `Π_j f(a_tj | full history)`.
    pub denominator: Vec<f64>,
    /// Per-step stabilised weight.
    pub stabilized: Vec<f64>,
    /// Cumulative product of stabilised weights up to and including `t`.
    pub cumulative: Vec<f64>,
    /// Cumulative weights clipped to the configured percentiles.
    pub truncated: Vec<f64>,
}

const PROB_FLOOR: f64 = 1e-12;

/// Value at quantile `q` with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Assembles weights from per-(row, treatment) probabilities of `a = 1`.
pub fn weights_from_probs(
    ds: &Dataset,
    num_probs: &[Vec<f64>],
    den_probs: &[Vec<f64>],
    truncation: Option<(f64, f64)>,
) -> PropensityWeights {
    let rows = ds.num_steps();
    let mut out = PropensityWeights {
        numerator: Vec::with_capacity(rows),
        denominator: Vec::with_capacity(rows),
        stabilized: Vec::with_capacity(rows),
        cumulative: Vec::with_capacity(rows),
        truncated: Vec::new(),
    };
    let mut r = 0;
    for p in &ds.patients {
        let mut cum = 1.0;
        for a in &p.a {
            let density = |probs: &[f64]| -> f64 {
                probs
                    .iter()
                    .zip(a)
                    .map(|(&q, &v)| if v == 1 { q } else { 1.0 - q })
                    .product::<f64>()
                    .max(PROB_FLOOR)
            };
            let num = density(&num_probs[r]);
            let den = density(&den_probs[r]);
            let sw = num / den;
            cum *= sw;
            out.numerator.push(num);
            out.denominator.push(den);
            out.stabilized.push(sw);
            out.cumulative.push(cum);
            r += 1;
        }
    }
    out.truncated = match truncation {
        Some((lo, hi)) if rows > 0 => {
            let (lo, hi) = (quantile(&out.cumulative, lo), quantile(&out.cumulative, hi));
            out.cumulative.iter().map(|w| w.clamp(lo, hi)).collect()
        }
        _ => out.cumulative.clone(),
    };
    out
}

pub fn compute_weights(models: &PropensityModels, ds: &Dataset, truncation: Option<(f64, f64)>) -> PropensityWeights {
    let num = build_features(ds, FeatureSet::Numerator);
    let den = build_features(ds, FeatureSet::Denominator);
    let probs = |design: &Design, ms: &[LogisticModel]| -> Vec<Vec<f64>> {
        (0..design.rows)
            .map(|r| ms.iter().map(|m| m.prob(design.row(r))).collect())
            .collect()
    };
    weights_from_probs(ds, &probs(&num, &models.numerator), &probs(&den, &models.denominator), truncation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// Ridge added to the normal equations, relative to their mean diagonal.
    pub ridge: f64,
    /// Set when the design was rank-deficient and the ridge had to grow.
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coef).map(|(x, b)| x * b).sum()
    }
}

/// Weighted least squares via normal equations. A relative ridge of 1e-8 is
/// always added and escalated while the Cholesky factorisation fails; the
/// base solve is then refined against the unregularised system.
pub fn fit_wls(design: &Design, y: &[f64], weights: &[f64]) -> Result<LinearModel> {
    let (n, p) = (design.rows, design.cols);
    if n == 0 || y.len() != n || weights.len() != n {
        return Err(Error::InvalidInput("weighted least squares needs matching, non-empty rows".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for r in 0..n {
        let row = design.row(r);
        let w = weights[r];
        for i in 0..p {
            let wi = w * row[i];
            rhs[i] += wi * y[r];
            for j in 0..=i {
                gram[i * p + j] += wi * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
    }
    let mean_diag = (0..p).map(|i| gram[i * p + i]).sum::<f64>() / p as f64;
    let mut ridge = 1e-8;
    let mut rank_deficient = false;
    let (solution, regularised) = loop {
        let mut a = gram.clone();
        for i in 0..p {
            a[i * p + i] += ridge * mean_diag;
        }
        match cholesky_solve(&a, &rhs) {
            Ok(beta) if beta.iter().all(|b| b.is_finite()) => break (beta, a),
            _ if ridge < 1.0 => {
                ridge *= 100.0;
                rank_deficient = true;
            }
            _ => return Err(Error::Evaluation("normal equations could not be solved".into())),
        }
    };
    let mut beta = solution;
    if !rank_deficient {
        for _ in 0..2 {
            let resid: Vec<f64> = (0..p)
                .map(|i| rhs[i] - (0..p).map(|j| gram[i * p + j] * beta[j]).sum::<f64>())
                .collect();
            let delta = cholesky_solve(&regularised, &resid)?;
            beta.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
        }
    }
    Ok(LinearModel {
        names: design.names.clone(),
        coef: beta,
        ridge,
        rank_deficient,
    })
}

/// `Σ w (y − Xβ)² / Σ w` and its gradient in β.
pub fn wls_loss_grad(beta: &[f64], design: &Design, y: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; design.cols];
    for r in 0..design.rows {
        let row = design.row(r);
        let err = row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>() - y[r];
        loss += weights[r] * err * err;
        for (g, x) in grad.iter_mut().zip(row) {
            *g += 2.0 * weights[r] * err * x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= total);
    (loss / total, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsmConfig {
    pub logistic: LogisticConfig,
    /// Percentiles at which cumulative weights are clipped; `None` disables.
    pub truncation: Option<(f64, f64)>,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            logistic: LogisticConfig::default(),
            truncation: Some((0.01, 0.99)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub propensity: PropensityModels,
    pub outcome: LinearModel,
    pub mean_weight: f64,
}

fn outcomes(ds: &Dataset) -> Vec<f64> {
    ds.patients.iter().flat_map(|p| p.y.iter().copied()).collect()
}

/// Fits propensities, weights and the outcome regression on `ds`.
pub fn fit_msm(ds: &Dataset, cfg: &MsmConfig) -> Result<MsmModel> {
    let propensity = fit_propensity_models(ds, &cfg.logistic)?;
    let weights = compute_weights(&propensity, ds, cfg.truncation);
    let design = build_features(ds, FeatureSet::Outcome);
    let outcome = fit_wls(&design, &outcomes(ds), &weights.truncated)?;
    let mean_weight = weights.cumulative.iter().sum::<f64>() / weights.cumulative.len() as f64;
    Ok(MsmModel {
        propensity,
        outcome,
        mean_weight,
    })
}

/// One-step-ahead predictions, flattened patient-major.
pub fn predict_msm(model: &MsmModel, ds: &Dataset) -> Result<Vec<f64>> {
    let design = build_features(ds, FeatureSet::Outcome);
    if design.names != model.outcome.names {
        return Err(Error::Shape {
            expected: vec![model.outcome.names.len()],
            actual: vec![design.names.len()],
        });
    }
    Ok((0..design.rows).map(|r| model.outcome.predict_row(design.row(r))).collect())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    (se / pred.len() as f64).sqrt()
}

/// Test-set RMSE of a model fitted on `fit_on`.
pub fn msm_rmse(fit_on: &Dataset, test: &Dataset, cfg: &MsmConfig) -> Result<f64> {
    let model = fit_msm(fit_on, cfg)?;
    Ok(rmse(&predict_msm(&model, test)?, &outcomes(test)))
}

/// Writes every fitted coefficient as `model,feature,value` CSV.
pub fn write_coefficients(model: &MsmModel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "feature", "value"])?;
    let num_names = ["intercept".to_string()]
        .into_iter()
        .chain((0..model.propensity.numerator.first().map_or(1, |m| m.coef.len()) - 1).map(|j| format!("cum_a{j}")))
        .collect::<Vec<_>>();
    for (j, m) in model.propensity.numerator.iter().enumerate() {
        for (name, v) in num_names.iter().zip(&m.coef) {
            w.write_record([format!("numerator_a{j}"), name.clone(), v.to_string()])?;
        }
    }
    let den_names = &model.outcome.names;
    for (j, m) in model.propensity.denominator.iter().enumerate() {
        for (c, v) in m.coef.iter().enumerate() {
            let name = den_names.get(c).cloned().unwrap_or_else(|| format!("c{c}"));
            w.write_record([format!("denominator_a{j}"), name, v.to_string()])?;
        }
    }
    for (name, v) in model.outcome.names.iter().zip(&model.outcome.coef) {
        w.write_record(["outcome".to_string(), name.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;
    use crate::data::{PatientTrajectory, Provenance};
    use crate::numerics::{finite_diff_grad, max_relative_error, RngStream};

    fn random_design(n: usize, p: usize, seed: u64) -> Design {
        let mut rng = RngStream::new(seed);
        let mut values = Vec::with_capacity(n * p);
        for _ in 0..n {
            values.push(1.0);
            values.extend((1..p).map(|_| rng.normal(0.0, 1.0)));
        }
        Design {
            rows: n,
            cols: p,
            values,
            names: (0..p).map(|c| format!("c{c}")).collect(),
        }
    }

    #[test]
    fn feature_layout() {
        let mut ds = toy_dataset(&[3], 2, 1);
        ds.patients[0].a = vec![vec![1, 0], vec![1, 1], vec![0, 1]];
        let num = build_features(&ds, FeatureSet::Numerator);
        assert_eq!(num.cols, 3);
        assert_eq!(num.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(num.row(2), &[1.0, 2.0, 1.0]);
        let out = build_features(&ds, FeatureSet::Outcome);
        assert_eq!(out.cols, 1 + 2 + 4 + 2);
        assert_eq!(&out.row(0)[..3], &[1.0, 1.0, 0.0]);
        assert_eq!(&out.row(2)[..3], &[1.0, 2.0, 2.0]);
        // Lagged covariates and confounders are zero at the first step.
        assert_eq!(&out.row(0)[5..7], &[0.0, 0.0]);
        assert_eq!(out.row(0)[8], 0.0);
        assert_eq!(&out.row(1)[5..7], ds.patients[0].x[0].as_slice());
        let no_z = build_features(&ds.without_z(), FeatureSet::Denominator);
        assert_eq!(no_z.cols, 1 + 2 + 4);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let design = random_design(30, 4, 2);
        let mut rng = RngStream::new(3);
        let y: Vec<f64> = (0..30).map(|_| f64::from(u8::from(rng.bernoulli(0.4)))).collect();
        let w = vec![0.2, -0.5, 0.3, 0.8];
        for ridge in [0.0, 1e-2] {
            let (_, g) = logistic_loss_grad(&w, &design, &y, ridge);
            let num = finite_diff_grad(|w| logistic_loss_grad(w, &design, &y, ridge).0, &w, 1e-5).unwrap();
            assert!(max_relative_error(&g, &num, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn wls_gradient_matches_finite_differences() {
        let design = random_design(20, 3, 4);
        let mut rng = RngStream::new(5);
        let y: Vec<f64> = (0..20).map(|_| rng.normal(0.0, 1.0)).collect();
        let wts: Vec<f64> = (0..20).map(|_| rng.uniform() + 0.1).collect();
        let beta = vec![0.3, -0.2, 1.1];
        let (_, g) = wls_loss_grad(&beta, &design, &y, &wts);
        let num = finite_diff_grad(|b| wls_loss_grad(b, &design, &y, &wts).0, &beta, 1e-5).unwrap();
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-5);
    }

    #[test]
    fn independent_target_gives_base_rate() {
        let design = random_design(4000, 3, 6);
        let mut rng = RngStream::new(7);
        let y: Vec<f64> = (0..4000).map(|_| f64::from(u8::from(rng.bernoulli(0.3)))).collect();
        let base = y.iter().sum::<f64>() / 4000.0;
        let m = fit_logistic(&design, &y, &LogisticConfig::default()).unwrap();
        assert!(m.converged && !m.separation);
        for r in 0..50 {
            assert!((m.prob(design.row(r)) - base).abs() < 0.01 + 0.02);
        }
        let mean_p = (0..4000).map(|r| m.prob(design.row(r))).sum::<f64>() / 4000.0;
        assert!((mean_p - base).abs() < 0.01);
    }

    #[test]
    fn separation_is_flagged() {
        let design = random_design(200, 2, 8);
        let y: Vec<f64> = (0..200).map(|r| f64::from(u8::from(design.row(r)[1] > 0.0))).collect();
        let m = fit_logistic(&design, &y, &LogisticConfig::default()).unwrap();
        assert!(m.separation);
        assert_eq!(m.ridge, 1e-4);
        assert!(m.coef.iter().all(|c| c.is_finite() && c.abs() < 1e3));
    }

    #[test]
    fn identical_models_give_unit_weights() {
        let ds = toy_dataset(&[4, 3], 2, 9);
        let probs: Vec<Vec<f64>> = (0..ds.num_steps()).map(|r| vec![0.2 + 0.05 * r as f64, 0.6]).collect();
        let w = weights_from_probs(&ds, &probs, &probs, None);
        assert!(w.stabilized.iter().all(|&s| s == 1.0));
        assert!(w.cumulative.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn two_step_weight_by_hand() {
        let patients = vec![PatientTrajectory {
            x: vec![vec![0.0], vec![0.0]],
            a: vec![vec![1], vec![0]],
            y: vec![0.0, 0.0],
            z: None,
            group: None,
        }];
        let ds = Dataset::new(patients, 1, 1, Provenance::default()).unwrap();
        let w = weights_from_probs(&ds, &[vec![0.5], vec![0.5]], &[vec![0.8], vec![0.4]], None);
        let expected = (0.5 / 0.8) * (0.5 / 0.6);
        assert!((w.cumulative[1] - expected).abs() < 1e-15);
        assert!((w.cumulative[1] - 0.520_833_333_333).abs() < 1e-9);
    }

    #[test]
    fn truncation_clips_to_percentiles() {
        let ds = toy_dataset(&[50, 50], 1, 2);
        let mut rng = RngStream::new(1);
        let num: Vec<Vec<f64>> = (0..100).map(|_| vec![0.5]).collect();
        let den: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.uniform() * 0.8 + 0.1]).collect();
        let w = weights_from_probs(&ds, &num, &den, Some((0.01, 0.99)));
        let lo = quantile(&w.cumulative, 0.01);
        let hi = quantile(&w.cumulative, 0.99);
        assert!(w.truncated.iter().all(|&v| v >= lo && v <= hi));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }

    #[test]
    fn exact_linear_recovery_and_scale_invariance() {
        let design = random_design(50, 4, 11);
        let beta = [0.5, -1.5, 2.0, 0.25];
        let y: Vec<f64> = (0..50).map(|r| design.row(r).iter().zip(&beta).map(|(x, b)| x * b).sum()).collect();
        let m = fit_wls(&design, &y, &vec![1.0; 50]).unwrap();
        for (a, b) in m.coef.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-8);
        }
        let mut rng = RngStream::new(1);
        let noisy: Vec<f64> = y.iter().map(|v| v + rng.normal(0.0, 0.3)).collect();
        let w: Vec<f64> = (0..50).map(|_| rng.uniform() + 0.05).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let m1 = fit_wls(&design, &noisy, &w).unwrap();
        let m2 = fit_wls(&design, &noisy, &w2).unwrap();
        for (a, b) in m1.coef.iter().zip(&m2.coef) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_design_is_flagged() {
        let mut design = random_design(30, 3, 2);
        for r in 0..30 {
            design.values[r * 3 + 2] = 2.0 * design.values[r * 3 + 1];
        }
        let y: Vec<f64> = (0..30).map(|r| design.row(r)[1]).collect();
        let m = fit_wls(&design, &y, &vec![1.0; 30]).unwrap();
        assert!(m.coef.iter().all(|c| c.is_finite()));
        let pred: Vec<f64> = (0..30).map(|r| m.predict_row(design.row(r))).collect();
        assert!(rmse(&pred, &y) < 1e-3);
    }

    fn irls(design: &Design, y: &[f64]) -> Vec<f64> {
        use nalgebra::{DMatrix, DVector};
        let x = DMatrix::from_row_slice(design.rows, design.cols, &design.values);
        let yv = DVector::from_column_slice(y);
        let mut beta = DVector::zeros(design.cols);
        for _ in 0..50 {
            let eta = &x * &beta;
            let p = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
            let w = p.map(|q| q * (1.0 - q));
            let mut xtwx = DMatrix::zeros(design.cols, design.cols);
            for r in 0..design.rows {
                let row = x.row(r);
                xtwx += row.transpose() * row * w[r];
            }
            let grad = x.transpose() * (&yv - &p);
            let step = xtwx.cholesky().unwrap().solve(&grad);
            beta += &step;
            if step.norm() < 1e-13 {
                break;
            }
        }
        beta.iter().copied().collect()
    }

    #[test]
    fn logistic_matches_irls_oracle() {
        let mut design = random_design(1500, 4, 21);
        // Shift and scale one column to exercise the standardisation path.
        for r in 0..1500 {
            design.values[r * 4 + 2] = 5.0 + 3.0 * design.values[r * 4 + 2];
        }
        let mut rng = RngStream::new(22);
        let truth = [-0.3, 0.8, -0.2, 0.5];
        let y: Vec<f64> = (0..1500)
            .map(|r| {
                let eta: f64 = design.row(r).iter().zip(&truth).map(|(x, b)| x * b).sum();
                f64::from(u8::from(rng.bernoulli(sigmoid(eta))))
            })
            .collect();
        let fit = fit_logistic(&design, &y, &LogisticConfig::default()).unwrap();
        assert!(fit.converged);
        let oracle = irls(&design, &y);
        for (a, b) in fit.coef.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(64))]

        #[test]
        fn cumulative_weight_is_running_product(
            probs in proptest::collection::vec((0.05f64..0.95, 0.05f64..0.95), 7),
            seed in 0u64..1000,
        ) {
            let ds = toy_dataset(&[3, 4], 1, seed);
            let num: Vec<Vec<f64>> = probs.iter().map(|p| vec![p.0]).collect();
            let den: Vec<Vec<f64>> = probs.iter().map(|p| vec![p.1]).collect();
            let w = weights_from_probs(&ds, &num, &den, None);
            let mut r = 0;
            for p in &ds.patients {
                let mut acc = 1.0;
                for _ in 0..p.len() {
                    acc *= w.stabilized[r];
                    proptest::prop_assert!((w.cumulative[r] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
                    proptest::prop_assert!(w.cumulative[r] > 0.0);
                    r += 1;
                }
            }
        }
    }
}
