//! Experiment orchestration: scenario runs, confounding sweeps over repeated
//! simulations, uncertainty estimates and report files.

mod report;
mod svg;


use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, load_results, CellRecord, CheckRecord, ExperimentReport, Manifest, SummaryRow};

use crate::checks::{predictive_p_values, CheckConfig, CheckReport};
use crate::data::{config_hash, load_dataset, remove_covariate, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::factor::{
    infer_substitutes, load_checkpoint, random_search, train_factor_model, FactorModel, FactorModelConfig, SearchSpace,
    Track, TrainingLog,
};
use crate::msm::{fit_msm, predict_msm, rmse, MsmConfig, MsmModel};
use crate::numerics::derive_seed;
use crate::rmsn::{fit_rmsn, predict_rmsn, RmsnConfig};
use crate::sim::{positivity_violations, simulate_synthetic, simulate_tumor, SynthConfig, TumorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Scenario {
    /// Outcome model sees observed covariates and treatments only.
    Confounded,
    /// Simulated confounders are added as covariates.
    Oracle,
    /// Substitute confounders of dimension `d_z` are added.
    Deconfounded { d_z: usize },
    /// As `Deconfounded`, after removing the first covariate.
    Violated { d_z: usize },
}

impl Scenario {
    fn factor_dim(self) -> Option<usize> {
        match self {
            Scenario::Deconfounded { d_z } | Scenario::Violated { d_z } => Some(d_z),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Confounded => write!(f, "confounded"),
            Scenario::Oracle => write!(f, "oracle"),
            Scenario::Deconfounded { d_z } => write!(f, "deconfounded-dz{d_z}"),
            Scenario::Violated { d_z } => write!(f, "violated-dz{d_z}"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dim = |rest: &str| -> Result<usize> {
            match rest.strip_prefix("-dz") {
                None if rest.is_empty() => Ok(1),
                Some(d) => d.parse().map_err(|_| Error::config(format!("bad scenario `{s}`"))),
                None => Err(Error::config(format!("bad scenario `{s}`"))),
            }
        };
        match s {
            "confounded" => Ok(Scenario::Confounded),
            "oracle" => Ok(Scenario::Oracle),
            _ if s.starts_with("deconfounded") => Ok(Scenario::Deconfounded { d_z: dim(&s[12..])? }),
            _ if s.starts_with("violated") => Ok(Scenario::Violated { d_z: dim(&s[8..])? }),
            _ => Err(Error::config(format!("unknown scenario `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Msm,
    Rmsn,
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeKind::Msm => "msm",
            OutcomeKind::Rmsn => "rmsn",
        })
    }
}

impl FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msm" => Ok(OutcomeKind::Msm),
            "rmsn" => Ok(OutcomeKind::Rmsn),
            _ => Err(Error::config(format!("unknown outcome model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Tumor(TumorConfig),
    File { path: PathBuf },
}

impl DataSource {
    /// Dataset plus the volume used to normalise errors, if any.
    pub fn load(&self) -> Result<(Dataset, Option<f64>)> {
        match self {
            DataSource::Synthetic(cfg) => Ok((simulate_synthetic(cfg)?, None)),
            DataSource::Tumor(cfg) => Ok((simulate_tumor(cfg)?.dataset, Some(cfg.max_volume()))),
            DataSource::File { path } => Ok((load_dataset(path)?, None)),
        }
    }

    /// Same source with confounding strength `gamma` and generator seed `seed`.
    pub fn with_gamma_and_seed(&self, gamma: f64, seed: u64) -> Result<Self> {
        match self {
            DataSource::Synthetic(cfg) => Ok(DataSource::Synthetic(SynthConfig {
                seed,
                ..cfg.clone().with_gamma(gamma)
            })),
            DataSource::Tumor(cfg) => Ok(DataSource::Tumor(TumorConfig {
                seed,
                chemo_coeff: gamma,
                radio_coeff: gamma,
                ..cfg.clone()
            })),
            DataSource::File { .. } => Err(Error::config("sweeps need a generator, not a file")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub split: (f64, f64, f64),
    pub factor: FactorModelConfig,
    /// Random-search trials for the factor model; 0 trains `factor` as given.
    pub search_iterations: usize,
    /// Monte-Carlo draws averaged into the substitute used downstream.
    pub substitute_samples: usize,
    pub checks: CheckConfig,
    /// Mean predictive p-values outside this band raise a warning.
    pub check_band: (f64, f64),
    pub msm: MsmConfig,
    pub rmsn: RmsnConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split: (0.8, 0.1, 0.1),
            factor: FactorModelConfig::default(),
            search_iterations: 0,
            substitute_samples: 10,
            checks: CheckConfig::default(),
            check_band: (0.3, 0.7),
            msm: MsmConfig::default(),
            rmsn: RmsnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub outcome: OutcomeKind,
    pub data: DataSource,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Pre-trained factor model; replaces training for substitute scenarios.
    #[serde(default)]
    pub factor_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// Train, validation and test splits of one dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Errors are reported as `100 · RMSE / normaliser` when set.
    pub normaliser: Option<f64>,
    pub warnings: Vec<String>,
}

impl PreparedData {
    pub fn new(ds: &Dataset, normaliser: Option<f64>, split: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (train, val, test) = split_dataset(ds, split, seed)?;
        let mut warnings = Vec::new();
        let violations = positivity_violations(ds, 1);
        if !violations.is_empty() {
            warnings.push(format!(
                "{} (step, treatment) pairs have no variation in the assigned treatment",
                violations.len()
            ));
        }
        Ok(Self {
            train,
            val,
            test,
            normaliser,
            warnings,
        })
    }

    fn map(&self, f: impl Fn(&Dataset) -> Result<Dataset>) -> Result<Self> {
        Ok(Self {
            train: f(&self.train)?,
            val: f(&self.val)?,
            test: f(&self.test)?,
            normaliser: self.normaliser,
            warnings: self.warnings.clone(),
        })
    }

    fn report(&self, raw: f64) -> f64 {
        match self.normaliser {
            Some(v) => 100.0 * raw / v,
            None => raw,
        }
    }
}

/// A fitted factor model with its checks and mean substitutes per split.
#[derive(Clone, Debug)]
pub struct FactorFit {
    pub model: FactorModel,
    pub log: TrainingLog,
    pub check: CheckReport,
    pub check_warning: Option<String>,
    pub z: [Vec<Track>; 3],
}

fn train_or_search(data: &PreparedData, config: &FactorModelConfig, pipeline: &PipelineConfig, seed: u64) -> Result<(FactorModel, TrainingLog)> {
    if pipeline.search_iterations == 0 {
        return train_factor_model(&data.train, &data.val, config);
    }
    let space = SearchSpace::for_variant(config.variant);
    let found = random_search(&data.train, &data.val, config, &space, pipeline.search_iterations, seed)?;
    Ok((found.model, found.log))
}

/// Trains (or loads) a factor model, runs predictive checks on the
/// validation split and infers mean substitutes for every split.
pub fn fit_factor(
    data: &PreparedData,
    d_z: usize,
    pipeline: &PipelineConfig,
    checkpoint: Option<&PathBuf>,
    seed: u64,
) -> Result<FactorFit> {
    let (model, log) = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let config = FactorModelConfig {
                d_z,
                seed: derive_seed(seed, "factor-init", 0),
                ..pipeline.factor.clone()
            };
            train_or_search(data, &config, pipeline, derive_seed(seed, "factor-search", 0))?
        }
    };
    let checks = CheckConfig {
        seed: derive_seed(seed, "checks", 0),
        ..pipeline.checks.clone()
    };
    let check = predictive_p_values(&model, &data.val, &checks)?;
    let mean_p = check.mean_p_value();
    let (lo, hi) = pipeline.check_band;
    let check_warning = (!(lo..=hi).contains(&mean_p))
        .then(|| format!("mean predictive p-value {mean_p:.3} outside [{lo}, {hi}]"));
    let s = pipeline.substitute_samples.max(1);
    let infer = |ds: &Dataset, label: u64| -> Result<Vec<Track>> {
        Ok(infer_substitutes(&model, ds, s, derive_seed(seed, "substitutes", label))?.mean())
    };
    let z = [infer(&data.train, 0)?, infer(&data.val, 1)?, infer(&data.test, 2)?];
    Ok(FactorFit {
        model,
        log,
        check,
        check_warning,
        z,
    })
}

#[derive(Clone, Debug)]
pub struct OutcomeFit {
    /// Test-split predictions, flattened patient-major.
    pub predictions: Vec<f64>,
    pub mean_weight: f64,
    pub msm: Option<MsmModel>,
}

/// Outcome-model predictions on the test split after fitting on train+val.
pub fn fit_outcome_predict(data: &PreparedData, outcome: OutcomeKind, pipeline: &PipelineConfig, seed: u64) -> Result<OutcomeFit> {
    let fit_on = data.train.concat(&data.val)?;
    match outcome {
        OutcomeKind::Msm => {
            let model = fit_msm(&fit_on, &pipeline.msm)?;
            Ok(OutcomeFit {
                predictions: predict_msm(&model, &data.test)?,
                mean_weight: model.mean_weight,
                msm: Some(model),
            })
        }
        OutcomeKind::Rmsn => {
            let cfg = RmsnConfig {
                seed: derive_seed(seed, "rmsn", 0),
                ..pipeline.rmsn.clone()
            };
            let model = fit_rmsn(&fit_on, &data.val, &cfg)?;
            Ok(OutcomeFit {
                predictions: predict_rmsn(&model, &data.test)?,
                mean_weight: model.mean_weight,
                msm: None,
            })
        }
    }
}

fn test_outcomes(ds: &Dataset) -> Vec<f64> {
    ds.patients.iter().flat_map(|p| p.y.iter().copied()).collect()
}

/// Data as seen by a scenario's outcome model.
pub fn scenario_data(data: &PreparedData, scenario: Scenario, factor: Option<&FactorFit>) -> Result<PreparedData> {
    match scenario {
        Scenario::Confounded => data.map(|d| Ok(d.without_z())),
        Scenario::Oracle => {
            if !(data.train.has_oracle_z() && data.val.has_oracle_z() && data.test.has_oracle_z()) {
                return Err(Error::config("oracle scenario needs simulated confounders"));
            }
            Ok(data.clone())
        }
        Scenario::Deconfounded { .. } | Scenario::Violated { .. } => {
            let fit = factor.ok_or_else(|| Error::config("substitute scenarios need a factor model"))?;
            let base = match scenario {
                Scenario::Violated { .. } => data.map(|d| remove_covariate(d, 0))?,
                _ => data.clone(),
            };
            Ok(PreparedData {
                train: base.train.with_z(fit.z[0].clone())?,
                val: base.val.with_z(fit.z[1].clone())?,
                test: base.test.with_z(fit.z[2].clone())?,
                ..base
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub outcome: OutcomeKind,
    /// Test RMSE, normalised when the data source defines a normaliser.
    pub rmse: f64,
    pub raw_rmse: f64,
    pub mean_weight: f64,
    pub check: Option<CheckReport>,
    pub warnings: Vec<String>,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub msm: Option<MsmModel>,
}

fn factor_input(data: &PreparedData, scenario: Scenario) -> Result<PreparedData> {
    match scenario {
        Scenario::Violated { .. } => data.map(|d| remove_covariate(&d.without_z(), 0)),
        _ => data.map(|d| Ok(d.without_z())),
    }
}

fn evaluate_cell(
    data: &PreparedData,
    scenario: Scenario,
    outcome: OutcomeKind,
    factor: Option<&FactorFit>,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<ScenarioResult> {
    let start = Instant::now();
    let view = scenario_data(data, scenario, factor)?;
    let fit = fit_outcome_predict(&view, outcome, pipeline, seed)?;
    let raw = rmse(&fit.predictions, &test_outcomes(&view.test));
    let mut warnings = data.warnings.clone();
    if let Some(w) = factor.and_then(|f| f.check_warning.clone()) {
        warnings.push(w);
    }
    Ok(ScenarioResult {
        scenario,
        outcome,
        rmse: data.report(raw),
        raw_rmse: raw,
        mean_weight: fit.mean_weight,
        msm: fit.msm,
        check: factor.map(|f| f.check.clone()),
        warnings,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Full pipeline for one scenario: load, split, optionally fit the factor
/// model, fit the outcome model on train+val and score the test split.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioResult> {
    let (ds, normaliser) = spec.data.load()?;
    let data = PreparedData::new(&ds, normaliser, spec.pipeline.split, derive_seed(spec.seed, "split", 0))?;
    let factor = match spec.scenario.factor_dim() {
        Some(d_z) => Some(fit_factor(
            &factor_input(&data, spec.scenario)?,
            d_z,
            &spec.pipeline,
            spec.factor_checkpoint.as_ref(),
            derive_seed(spec.seed, "factor", 0),
        )?),
        None => None,
    };
    evaluate_cell(&data, spec.scenario, spec.outcome, factor.as_ref(), &spec.pipeline, derive_seed(spec.seed, "outcome", 0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    /// Mean and variance across substitute draws of each test prediction,
    /// flattened patient-major.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl UncertaintyEstimate {
    pub fn median_variance(&self) -> f64 {
        let mut v = self.variance.clone();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return f64::NAN;
        }
        let m = v.len() / 2;
        if v.len() % 2 == 0 {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    }
}

/// Fits one outcome model per substitute draw and reports the spread of the
/// resulting test predictions.
pub fn uncertainty_estimate(spec: &ScenarioSpec, n_samples: usize) -> Result<UncertaintyEstimate> {
    if n_samples < 2 {
        return Err(Error::config("uncertainty needs at least two substitute samples"));
    }
    let d_z = spec
        .scenario
        .factor_dim()
        .ok_or_else(|| Error::config("uncertainty is defined for substitute scenarios"))?;
    let (ds, normaliser) = spec.data.load()?;
    let data = PreparedData::new(&ds, normaliser, spec.pipeline.split, derive_seed(spec.seed, "split", 0))?;
    let input = factor_input(&data, spec.scenario)?;
    let seed = derive_seed(spec.seed, "factor", 0);
    let (model, _) = match &spec.factor_checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let config = FactorModelConfig {
                d_z,
                seed: derive_seed(seed, "factor-init", 0),
                ..spec.pipeline.factor.clone()
            };
            train_or_search(&input, &config, &spec.pipeline, derive_seed(seed, "factor-search", 0))?
        }
    };
    let draws = [&input.train, &input.val, &input.test]
        .iter()
        .enumerate()
        .map(|(i, d)| infer_substitutes(&model, d, n_samples, derive_seed(seed, "uncertainty", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let preds = (0..n_samples)
        .map(|s| {
            let fit = FactorFit {
                model: model.clone(),
                log: TrainingLog::default(),
                check: CheckReport {
                    m: 0,
                    mc_samples: 0,
                    timesteps: Vec::new(),
                    clamped: false,
                },
                check_warning: None,
                z: [draws[0].draws[s].clone(), draws[1].draws[s].clone(), draws[2].draws[s].clone()],
            };
            let view = scenario_data(&data, spec.scenario, Some(&fit))?;
            Ok(fit_outcome_predict(&view, spec.outcome, &spec.pipeline, derive_seed(spec.seed, "outcome", s as u64))?.predictions)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = preds[0].len();
    let s = n_samples as f64;
    let mean: Vec<f64> = (0..n).map(|i| preds.iter().map(|p| p[i]).sum::<f64>() / s).collect();
    let variance = (0..n)
        .map(|i| preds.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / (s - 1.0))
        .collect();
    Ok(UncertaintyEstimate { mean, variance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub n_datasets: usize,
    pub outcomes: Vec<OutcomeKind>,
    pub d_z: Vec<usize>,
    pub include_oracle: bool,
    pub include_violated: bool,
    pub data: DataSource,
    pub pipeline: PipelineConfig,
    pub master_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            n_datasets: 30,
            outcomes: vec![OutcomeKind::Msm, OutcomeKind::Rmsn],
            d_z: vec![1, 5],
            include_oracle: true,
            include_violated: true,
            data: DataSource::Synthetic(SynthConfig::default()),
            pipeline: PipelineConfig::default(),
            master_seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = vec![Scenario::Confounded];
        if self.include_oracle {
            out.push(Scenario::Oracle);
        }
        out.extend(self.d_z.iter().map(|&d_z| Scenario::Deconfounded { d_z }));
        if self.include_violated {
            out.push(Scenario::Violated {
                d_z: self.d_z.first().copied().unwrap_or(1),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 || self.gammas.is_empty() || self.outcomes.is_empty() {
            return Err(Error::config("sweep needs at least one gamma, dataset and outcome model"));
        }
        if self.d_z.contains(&0) {
            return Err(Error::config("substitute dimension must be positive"));
        }
        Ok(())
    }
}

fn gamma_label(gamma: f64) -> String {
    format!("{gamma}")
}

/// Seed for one (gamma, dataset, scenario, outcome) cell.
pub fn cell_seed(master: u64, gamma: f64, dataset: usize, scenario: Scenario, outcome: OutcomeKind) -> u64 {
    derive_seed(master, &format!("cell/{}/{scenario}/{outcome}", gamma_label(gamma)), dataset as u64)
}

pub fn dataset_seed(master: u64, gamma: f64, dataset: usize) -> u64 {
    derive_seed(master, &format!("dataset/{}", gamma_label(gamma)), dataset as u64)
}

struct UnitOutput {
    cells: Vec<CellRecord>,
    checks: Vec<CheckRecord>,
    warnings: Vec<String>,
    runtimes: Vec<(String, f64)>,
}

fn run_unit(cfg: &SweepConfig, gamma: f64, dataset: usize) -> UnitOutput {
    let mut out = UnitOutput {
        cells: Vec::new(),
        checks: Vec::new(),
        warnings: Vec::new(),
        runtimes: Vec::new(),
    };
    let seed = dataset_seed(cfg.master_seed, gamma, dataset);
    let scenarios = cfg.scenarios();
    let fail_all = |out: &mut UnitOutput, msg: String| {
        for &scenario in &scenarios {
            for &outcome in &cfg.outcomes {
                out.cells.push(CellRecord {
                    gamma,
                    dataset,
                    scenario: scenario.to_string(),
                    outcome: outcome.to_string(),
                    seed: cell_seed(cfg.master_seed, gamma, dataset, scenario, outcome),
                    rmse: None,
                    status: format!("failed: {msg}"),
                });
            }
        }
    };
    let data = match cfg
        .data
        .with_gamma_and_seed(gamma, seed)
        .and_then(|src| src.load())
        .and_then(|(ds, norm)| PreparedData::new(&ds, norm, cfg.pipeline.split, derive_seed(seed, "split", 0)))
    {
        Ok(d) => d,
        Err(e) => {
            fail_all(&mut out, e.to_string());
            return out;
        }
    };
    out.warnings.extend(data.warnings.iter().map(|w| format!("gamma {gamma} dataset {dataset}: {w}")));
    let mut factors: HashMap<Scenario, std::result::Result<FactorFit, String>> = HashMap::new();
    for &scenario in &scenarios {
        if scenario.factor_dim().is_none() {
            continue;
        }
        let d_z = scenario.factor_dim().unwrap_or(1);
        let start = Instant::now();
        let fit = factor_input(&data, scenario)
            .and_then(|input| {
                fit_factor(
                    &input,
                    d_z,
                    &cfg.pipeline,
                    None,
                    derive_seed(seed, &format!("factor/{scenario}"), 0),
                )
            })
            .map_err(|e| e.to_string());
        out.runtimes.push((format!("{gamma}/{dataset}/factor/{scenario}"), start.elapsed().as_secs_f64()));
        if let Ok(f) = &fit {
            out.checks.extend(f.check.timesteps.iter().map(|c| CheckRecord {
                gamma,
                dataset,
                scenario: scenario.to_string(),
                t: c.t,
                p_value: c.p_value,
                n_active: c.n_active,
            }));
        }
        factors.insert(scenario, fit);
    }
    for &scenario in &scenarios {
        for &outcome in &cfg.outcomes {
            let cseed = cell_seed(cfg.master_seed, gamma, dataset, scenario, outcome);
            let result = match factors.get(&scenario) {
                Some(Err(e)) => Err(Error::Evaluation(format!("factor model: {e}"))),
                Some(Ok(f)) => evaluate_cell(&data, scenario, outcome, Some(f), &cfg.pipeline, cseed),
                None => evaluate_cell(&data, scenario, outcome, None, &cfg.pipeline, cseed),
            };
            let (rmse, status) = match result {
                Ok(r) => {
                    out.runtimes.push((format!("{gamma}/{dataset}/{scenario}/{outcome}"), r.runtime_secs));
                    let status = match factors.get(&scenario).and_then(|f| f.as_ref().ok()).and_then(|f| f.check_warning.as_ref()) {
                        Some(_) => "check-warning".to_string(),
                        None => "ok".to_string(),
                    };
                    (Some(r.rmse), status)
                }
                Err(e) => (None, format!("failed: {e}")),
            };
            out.cells.push(CellRecord {
                gamma,
                dataset,
                scenario: scenario.to_string(),
                outcome: outcome.to_string(),
                seed: cseed,
                rmse,
                status,
            });
        }
    }
    for (scenario, fit) in &factors {
        if let Ok(Some(w)) = fit.as_ref().map(|f| f.check_warning.as_ref()) {
            out.warnings.push(format!("gamma {gamma} dataset {dataset} {scenario}: {w}"));
        }
    }
    out.warnings.sort();
    out
}

/// Runs every scenario and outcome model on `n_datasets` simulations per
/// confounding strength. Failed cells are recorded and the sweep continues.
pub fn run_gamma_sweep(cfg: &SweepConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let units: Vec<(f64, usize)> = cfg
        .gammas
        .iter()
        .flat_map(|&g| (0..cfg.n_datasets).map(move |d| (g, d)))
        .collect();
    let start = Instant::now();
    let outputs: Vec<UnitOutput> = units.par_iter().map(|&(g, d)| run_unit(cfg, g, d)).collect();
    let mut report = ExperimentReport::default();
    let mut runtimes = Vec::new();
    for o in outputs {
        report.cells.extend(o.cells);
        report.checks.extend(o.checks);
        report.warnings.extend(o.warnings);
        runtimes.extend(o.runtimes);
    }
    report.manifest = Manifest {
        master_seed: cfg.master_seed,
        config_hash: config_hash(cfg)?,
        config: serde_json::to_value(cfg)?,
        dataset_seeds: units
            .iter()
            .map(|&(g, d)| (format!("{}/{d}", gamma_label(g)), dataset_seed(cfg.master_seed, g, d)))
            .collect(),
        runtimes,
        total_runtime_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(report)
}
