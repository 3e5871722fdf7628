use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::svg::{LineChart, Series};
use crate::error::{Error, Result};

/// One (gamma, dataset, scenario, outcome) result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub gamma: f64,
    pub dataset: usize,
    pub scenario: String,
    pub outcome: String,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub gamma: f64,
    pub dataset: usize,
    pub scenario: String,
    pub t: usize,
    pub p_value: f64,
    pub n_active: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gamma: f64,
    pub scenario: String,
    pub outcome: String,
    pub n: usize,
    pub mean_rmse: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub dataset_seeds: Vec<(String, u64)>,
    pub runtimes: Vec<(String, f64)>,
    pub total_runtime_secs: f64,
    pub version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellRecord>,
    pub checks: Vec<CheckRecord>,
    pub warnings: Vec<String>,
    pub manifest: Manifest,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.rmse.is_none()).count()
    }

    pub fn rmse(&self, gamma: f64, dataset: usize, scenario: &str, outcome: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.gamma == gamma && c.dataset == dataset && c.scenario == scenario && c.outcome == outcome)
            .and_then(|c| c.rmse)
    }

    /// Mean and standard error per (gamma, scenario, outcome) over successful cells.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((f64, String, String), Vec<f64>)> = Vec::new();
        for c in &self.cells {
            let key = (c.gamma, c.scenario.clone(), c.outcome.clone());
            let idx = match groups.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    groups.push((key, Vec::new()));
                    groups.len() - 1
                }
            };
            if let Some(r) = c.rmse {
                groups[idx].1.push(r);
            }
        }
        groups
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|((gamma, scenario, outcome), v)| {
                let (mean_rmse, std_error) = mean_and_stderr(&v);
                SummaryRow {
                    gamma,
                    scenario,
                    outcome,
                    n: v.len(),
                    mean_rmse,
                    std_error,
                }
            })
            .collect()
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const RESULT_HEADER: [&str; 7] = ["gamma", "dataset", "scenario", "outcome", "seed", "rmse", "status"];

/// Writes `results.csv`, `summary.csv`, `pvalues.csv`, `plots/*.svg` and
/// `manifest.json` into `out_dir`.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    write_csv(&out_dir.join("results.csv"), &report.cells, &RESULT_HEADER)?;
    let summary = report.summary();
    write_csv(
        &out_dir.join("summary.csv"),
        &summary,
        &["gamma", "scenario", "outcome", "n", "mean_rmse", "std_error"],
    )?;
    write_csv(
        &out_dir.join("pvalues.csv"),
        &report.checks,
        &["gamma", "dataset", "scenario", "t", "p_value", "n_active"],
    )?;

    let outcomes: Vec<&str> = dedup(summary.iter().map(|r| r.outcome.as_str()));
    for outcome in outcomes {
        let mut chart = LineChart::new(format!("Test RMSE ({outcome})"), "gamma", "RMSE");
        for scenario in dedup(summary.iter().filter(|r| r.outcome == outcome).map(|r| r.scenario.as_str())) {
            let points = summary
                .iter()
                .filter(|r| r.outcome == outcome && r.scenario == scenario)
                .map(|r| (r.gamma, r.mean_rmse, r.std_error))
                .collect();
            chart.series.push(Series {
                name: scenario.to_string(),
                points,
            });
        }
        write_text(&plots.join(format!("rmse_{outcome}.svg")), &chart.render())?;
    }

    let gammas: Vec<f64> = {
        let mut g: Vec<f64> = report.checks.iter().map(|c| c.gamma).collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    };
    for gamma in gammas {
        let mut chart = LineChart::new(format!("Predictive p-values (gamma {gamma})"), "timestep", "p-value");
        for scenario in dedup(report.checks.iter().filter(|c| c.gamma == gamma).map(|c| c.scenario.as_str())) {
            let mut by_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for c in report.checks.iter().filter(|c| c.gamma == gamma && c.scenario == scenario) {
                by_t.entry(c.t).or_default().push(c.p_value);
            }
            let points = by_t
                .into_iter()
                .map(|(t, v)| {
                    let (m, se) = mean_and_stderr(&v);
                    (t as f64, m, se)
                })
                .collect();
            chart.series.push(Series {
                name: scenario.to_string(),
                points,
            });
        }
        write_text(&plots.join(format!("pvalues_gamma{gamma}.svg")), &chart.render())?;
    }

    #[derive(Serialize)]
    struct ManifestFile<'a> {
        #[serde(flatten)]
        manifest: &'a Manifest,
        warnings: &'a [String],
        failed_cells: usize,
    }
    let manifest = ManifestFile {
        manifest: &report.manifest,
        warnings: &report.warnings,
        failed_cells: report.failed_cells(),
    };
    write_text(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

fn dedup<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a `results.csv` written by [`emit_report`].
pub fn load_results(path: &Path) -> Result<Vec<CellRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        out.push(row.map_err(|e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
