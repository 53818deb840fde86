//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ctmflow_core::model::Objective;
use ctmflow_core::train::{compare_gradients, grad_check_setup, stream_rng, GradCheckReport, Stream};
use ctmflow_core::{fit, Dataset, ErrorDistribution, Side};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, TermConfig};
use crate::error::{CliError, Result};
use crate::io::{read_json, write_csv, Table};
use crate::modelfile::{log_path, write_training_log, ModelFile};
use crate::predict::{predict, Query};
use crate::suite::{run_benchmark_suite, run_simulation_suite, write_simulation_tables, BenchmarkSuite, SimulationSuite};

#[derive(Debug, Parser)]
#[command(name = "ctmflow", version, about = "Deep conditional transformation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it with its training log.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `fit.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Conditional quantiles, CDF or density for each data row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// quantiles, cdf-grid or density-grid
        #[arg(long, default_value = "quantiles")]
        at: String,
        /// Comma-separated probabilities for `--at quantiles`.
        #[arg(long)]
        probs: Option<String>,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partial effect of one structured term over a feature grid.
    PartialEffects {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        term: String,
        /// interaction or shift, for terms on both sides.
        #[arg(long)]
        side: Option<String>,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation suite.
    Simulate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tabular benchmark on local CSV files.
    Benchmark {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Model config; a small mixed structured and deep model by default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data for the check; 50 synthetic rows by default.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Print the version.
    Version,
}

/// Runs the command and maps failures to exit codes.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Fit { data, config, out, seed } => cmd_fit(&data, &config, &out, seed).map(|_| 0),
        Command::Predict { model, data, at, probs, grid, out } => {
            let query = Query::parse(&at, probs.as_deref(), grid)?;
            cmd_predict(&model, &data, &query, &out).map(|_| 0)
        }
        Command::PartialEffects { model, term, side, grid, out } => {
            let side = match side.as_deref() {
                None => None,
                Some("interaction") => Some(Side::Interaction),
                Some("shift") => Some(Side::Shift),
                Some(other) => return Err(CliError::Config(format!("--side must be interaction or shift, got `{other}`"))),
            };
            cmd_partial_effects(&model, &term, side, grid, &out).map(|_| 0)
        }
        Command::Simulate { suite, out } => {
            let suite: SimulationSuite = read_json(&suite).map_err(config_error)?;
            let rows = run_simulation_suite(&suite)?;
            write_simulation_tables(&out, &suite, &rows)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            eprintln!("{} replications, {failed} failed; tables in {}", rows.len(), out.display());
            Ok(0)
        }
        Command::Benchmark { suite, out } => {
            let suite: BenchmarkSuite = read_json(&suite).map_err(config_error)?;
            let runs = run_benchmark_suite(&suite, &out)?;
            let failed = runs.iter().filter(|r| r.result.is_err()).count();
            eprintln!("{} runs, {failed} failed; tables in {}", runs.len(), out.display());
            Ok(0)
        }
        Command::Gradcheck { config, data, seed, tolerance, corrupt_gradient } => {
            let config = match config {
                Some(p) => ModelConfig::load(p)?,
                None => default_gradcheck_config(),
            };
            let report = cmd_gradcheck(&config, data.as_deref(), seed, tolerance, corrupt_gradient)?;
            println!(
                "gradcheck: {} params, max relative error {:.3e} at {} (tolerance {:.1e}, {} relu kinks skipped): {}",
                report.params,
                report.max_rel_error,
                report.worst_index,
                report.tolerance,
                report.kinks,
                if report.pass { "pass" } else { "FAIL" }
            );
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Version => {
            println!("ctmflow {} (model format_version {})", env!("CARGO_PKG_VERSION"), crate::modelfile::FORMAT_VERSION);
            Ok(0)
        }
    }
}

fn config_error(e: CliError) -> CliError {
    match e {
        CliError::Parse { path, message } => CliError::Config(format!("{}: {message}", path.display())),
        other => other,
    }
}

/// Reads the columns a config uses; other columns may have gaps.
pub fn load_training_data(config: &ModelConfig, path: &Path) -> Result<(Dataset, usize)> {
    let features = config.features();
    let mut keep = vec![config.outcome.clone()];
    keep.extend(features.iter().cloned());
    let table = Table::read(path, Some(&keep))?;
    Ok((table.dataset(&config.outcome, &features)?, table.dropped))
}

pub fn cmd_fit(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<ModelFile> {
    let config = ModelConfig::load(config)?;
    let spec = config.spec()?;
    let mut fit_config = config.fit_config();
    if let Some(s) = seed {
        fit_config.seed = s;
    }
    let (dataset, dropped) = load_training_data(&config, data)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} rows with missing values");
    }
    let (model, log) = fit(&spec, &dataset, &fit_config)?;
    let file = ModelFile::new(&config.outcome, model);
    file.save(out)?;
    write_training_log(log_path(out), &log)?;
    eprintln!(
        "fitted {} rows ({} validation) in {} epochs, best epoch {} ({:?})",
        log.train_rows,
        log.val_rows,
        log.epochs.len(),
        log.best_epoch,
        log.stop_reason
    );
    if log.jacobian_violations > 0 {
        eprintln!("warning: {} training rows hit the Jacobian floor", log.jacobian_violations);
    }
    if log.warnings.clamped_features > 0 {
        eprintln!("warning: {} feature values clamped to spline support", log.warnings.clamped_features);
    }
    for s in log.smoothing.iter().filter(|s| s.capped) {
        eprintln!("warning: smoothing of `{}` hit the lambda cap", s.term);
    }
    Ok(file)
}

/// Feature table for a fitted model; columns the model does not use are ignored.
pub fn load_prediction_data(file: &ModelFile, path: &Path) -> Result<Dataset> {
    let table = Table::read(path, None)?;
    let features: Vec<String> = file.model.feature_names().iter().map(|s| s.to_string()).collect();
    for h in &table.headers {
        if *h != file.outcome && !features.contains(h) {
            eprintln!("warning: column `{h}` is not used by the model and is ignored");
        }
    }
    // the outcome is not needed for prediction, so rows lacking it are kept
    let table = Table::read(path, Some(&features))?;
    if table.dropped > 0 {
        eprintln!("dropped {} rows with missing values", table.dropped);
    }
    table.prediction_dataset(&file.outcome, &features)
}

pub fn cmd_predict(model: &Path, data: &Path, query: &Query, out: &Path) -> Result<()> {
    let file = ModelFile::load(model)?;
    let dataset = load_prediction_data(&file, data)?;
    let table = predict(&file.model, &dataset, query)?;
    if table.boundary_hits > 0 {
        eprintln!("warning: {} quantiles fell outside the outcome support and were set to a bound", table.boundary_hits);
    }
    write_csv(out, &table.headers, &table.rows)
}

pub fn cmd_partial_effects(model: &Path, term: &str, side: Option<Side>, grid: usize, out: &Path) -> Result<()> {
    let file = ModelFile::load(model)?;
    let effect = file.model.partial_effect(term, side, grid)?;
    write_csv(out, &effect.columns, &effect.rows)
}

/// Mixed structured and deep model over `x1` and `x2`.
pub fn default_gradcheck_config() -> ModelConfig {
    ModelConfig {
        error: ErrorDistribution::Gaussian,
        bernstein_order: 6,
        outcome: "y".into(),
        interaction: vec![
            TermConfig::Intercept { name: None },
            TermConfig::Smooth { name: None, feature: "x1".into(), q: 6, degree: 3, penalty_order: 2, df: Some(4.0), lambda: None },
        ],
        shift: vec![
            TermConfig::Linear { name: None, feature: "x2".into() },
            TermConfig::Smooth { name: None, feature: "x2".into(), q: 8, degree: 3, penalty_order: 2, df: None, lambda: Some(0.5) },
            TermConfig::Deep { name: None, features: vec!["x1".into(), "x2".into()], layers: vec![16, 8, 1], orthogonalize: false },
        ],
        fit: Default::default(),
        penalty: Default::default(),
    }
}

/// `n` rows with uniform features and `y = sum(x) + N(0, 1)`.
pub fn synthetic_data(features: &[String], outcome: &str, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, Stream::Dgp);
    let cols: Vec<Vec<f64>> = features.iter().map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            cols.iter().map(|c| c[i]).sum::<f64>() + z
        })
        .collect();
    Ok(Dataset::new(outcome, y, features.to_vec(), cols)?)
}

pub fn cmd_gradcheck(
    config: &ModelConfig,
    data: Option<&Path>,
    seed: u64,
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let spec = config.spec()?;
    let dataset = match data {
        Some(p) => load_training_data(config, p)?.0,
        None => synthetic_data(&config.features(), &config.outcome, 50, seed)?,
    };
    let (layout, params) = grad_check_setup(&spec, &dataset, seed)?;
    let design = layout.design(&dataset)?;
    let objective = Objective::new(&layout, design, dataset.n())?;
    let (_, mut grad) = objective.loss_and_grad(&params)?;
    if corrupt {
        grad[0] = grad[0] * 1.01 + 1e-3;
    }
    Ok(compare_gradients(&objective, &params, &grad, tolerance)?)
}
