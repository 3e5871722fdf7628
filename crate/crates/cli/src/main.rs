use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use deconfounder_core::checks::{predictive_p_values, CheckConfig};
use deconfounder_core::data::{load_dataset, save_dataset, split_dataset};
use deconfounder_core::factor::{
    load_checkpoint, random_search, save_checkpoint, train_factor_model, FactorModelConfig, FactorVariant,
    SearchSpace,
};
use deconfounder_core::harness::{
    emit_report, load_results, run_gamma_sweep, run_scenario, uncertainty_estimate, DataSource, ExperimentReport,
    OutcomeKind, Scenario, ScenarioSpec, SweepConfig,
};
use deconfounder_core::msm::write_coefficients;
use deconfounder_core::sim::{simulate_synthetic, simulate_tumor, SynthConfig, TumorConfig};

/// Substitute confounders for time-varying treatments: simulate data, fit
/// factor models, run predictive checks and evaluate outcome models.
#[derive(Parser)]
#[command(name = "deconfounder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as JSONL with a metadata sidecar.
    Simulate(SimulateArgs),
    /// Train a factor model on a dataset's train split.
    TrainFactor(TrainArgs),
    /// Predictive p-values of a trained factor model on a held-out dataset.
    Check(CheckArgs),
    /// Run one scenario end to end and print its test RMSE.
    Evaluate(EvaluateArgs),
    /// Sweep confounding strengths over repeated simulations.
    Sweep(SweepArgs),
    /// Summarise a results.csv produced by `sweep`.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Synthetic,
    Tumor,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    generator: Generator,
    /// Generator configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Factor-model configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<FactorVariant>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random-search trials; 0 trains the configuration as given.
    #[arg(long, default_value_t = 0)]
    search: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Held-out dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-timestep p-values as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scenario specification (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// e.g. confounded, oracle, deconfounded-dz5, violated-dz1.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    outcome: Option<OutcomeKind>,
    /// Dataset file; replaces the generator in the specification.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    factor_checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also report per-prediction variance across this many substitute draws.
    #[arg(long)]
    uncertainty: Option<usize>,
    /// Write fitted MSM coefficients as CSV.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long)]
    n_datasets: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    outcomes: Option<Vec<OutcomeKind>>,
    #[arg(long, value_delimiter = ',')]
    d_z: Option<Vec<usize>>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    results: PathBuf,
    /// Regenerate summary files and plots into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let ds = match args.generator {
        Generator::Synthetic => {
            let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
            if let Some(g) = args.gamma {
                cfg = cfg.with_gamma(g);
            }
            cfg.n_patients = args.n_patients.unwrap_or(cfg.n_patients);
            cfg.seed = args.seed.unwrap_or(cfg.seed);
            simulate_synthetic(&cfg)?
        }
        Generator::Tumor => {
            let mut cfg: TumorConfig = read_config(args.config.as_deref())?;
            if let Some(g) = args.gamma {
                cfg.chemo_coeff = g;
                cfg.radio_coeff = g;
            }
            if let Some(n) = args.n_patients {
                let total = cfg.n_patients() as f64;
                cfg.n_val = (cfg.n_val as f64 * n as f64 / total).round() as usize;
                cfg.n_test = (cfg.n_test as f64 * n as f64 / total).round() as usize;
                cfg.n_train = n.saturating_sub(cfg.n_val + cfg.n_test);
            }
            cfg.seed = args.seed.unwrap_or(cfg.seed);
            let sim = simulate_tumor(&cfg)?;
            if sim.truncated_count() > 0 {
                eprintln!("warning: {} trajectories truncated", sim.truncated_count());
            }
            sim.dataset
        }
    };
    save_dataset(&ds, &args.out)?;
    println!("{} patients, {} steps -> {}", ds.len(), ds.num_steps(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?.without_z();
    let mut cfg: FactorModelConfig = read_config(args.config.as_deref())?;
    cfg.variant = args.variant.unwrap_or(cfg.variant);
    cfg.d_z = args.d_z.unwrap_or(cfg.d_z);
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let (train, val, _) = split_dataset(&ds, (0.8, 0.1, 0.1), args.split_seed)?;
    let (model, log) = if args.search > 0 {
        let space = SearchSpace::for_variant(cfg.variant);
        let found = random_search(&train, &val, &cfg, &space, args.search, cfg.seed)?;
        let failed = found.trials.iter().filter(|t| t.error.is_some()).count();
        if failed > 0 {
            eprintln!("warning: {failed} of {} search trials failed", found.trials.len());
        }
        (found.model, found.log)
    } else {
        train_factor_model(&train, &val, &cfg)?
    };
    save_checkpoint(&model, &log, &args.out)?;
    println!(
        "best validation loss {:.6} at epoch {} -> {}",
        log.best_val_loss,
        log.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn check(args: CheckArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (model, _) = load_checkpoint(&args.model)?;
    let mut cfg: CheckConfig = read_config(args.config.as_deref())?;
    cfg.replicas = args.replicas.unwrap_or(cfg.replicas);
    cfg.mc_samples = args.mc_samples.unwrap_or(cfg.mc_samples);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let report = predictive_p_values(&model, &ds, &cfg)?;
    if report.clamped {
        eprintln!("warning: probabilities were clamped when taking logs");
    }
    if let Some(out) = &args.out {
        let mut text = String::from("t,p_value,n_active,patient_p_mean,patient_stderr\n");
        for c in &report.timesteps {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                c.t, c.p_value, c.n_active, c.patient_p_mean, c.patient_stderr
            ));
        }
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    println!(
        "mean p-value {:.4} over {} timesteps (final third {:.4})",
        report.mean_p_value(),
        report.timesteps.len(),
        report.final_third_mean()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut spec: ScenarioSpec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ScenarioSpec {
            scenario: Scenario::Confounded,
            outcome: OutcomeKind::Msm,
            data: DataSource::Synthetic(SynthConfig::default()),
            pipeline: Default::default(),
            factor_checkpoint: None,
            seed: 0,
        },
    };
    spec.scenario = args.scenario.unwrap_or(spec.scenario);
    spec.outcome = args.outcome.unwrap_or(spec.outcome);
    spec.seed = args.seed.unwrap_or(spec.seed);
    if let Some(path) = args.data {
        spec.data = DataSource::File { path };
    }
    if args.factor_checkpoint.is_some() {
        spec.factor_checkpoint = args.factor_checkpoint;
    }
    let result = run_scenario(&spec)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(path), Some(model)) = (&args.coefficients, &result.msm) {
        write_coefficients(model, path)?;
    } else if args.coefficients.is_some() {
        bail!("coefficients are only available for the msm outcome model");
    }
    let mut json = serde_json::to_value(&result)?;
    if let Some(n) = args.uncertainty {
        let est = uncertainty_estimate(&spec, n)?;
        json["median_prediction_variance"] = serde_json::json!(est.median_variance());
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{} {} rmse {:.6}", spec.scenario, spec.outcome, result.rmse);
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    println!("{:>6}  {:<20} {:<6} {:>4}  {:>12}  {:>10}", "gamma", "scenario", "model", "n", "mean rmse", "std err");
    for row in report.summary() {
        println!(
            "{:>6}  {:<20} {:<6} {:>4}  {:>12.6}  {:>10.6}",
            row.gamma, row.scenario, row.outcome, row.n, row.mean_rmse, row.std_error
        );
    }
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut cfg: SweepConfig = read_config(args.config.as_deref())?;
    cfg.gammas = args.gammas.unwrap_or(cfg.gammas);
    cfg.n_datasets = args.n_datasets.unwrap_or(cfg.n_datasets);
    cfg.outcomes = args.outcomes.unwrap_or(cfg.outcomes);
    cfg.d_z = args.d_z.unwrap_or(cfg.d_z);
    cfg.master_seed = args.master_seed.unwrap_or(cfg.master_seed);
    let report = run_gamma_sweep(&cfg)?;
    emit_report(&report, &args.out)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print_summary(&report);
    let failed = report.failed_cells();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see {}", report.cells.len(), args.out.join("results.csv").display());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<()> {
    let report = ExperimentReport {
        cells: load_results(&args.results)?,
        ..ExperimentReport::default()
    };
    print_summary(&report);
    if let Some(out) = &args.out {
        emit_report(&report, out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a).map(|()| ExitCode::SUCCESS),
        Command::TrainFactor(a) => train(a).map(|()| ExitCode::SUCCESS),
        Command::Check(a) => check(a).map(|()| ExitCode::SUCCESS),
        Command::Evaluate(a) => evaluate(a).map(|()| ExitCode::SUCCESS),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
