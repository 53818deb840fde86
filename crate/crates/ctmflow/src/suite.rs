//! Simulation suites and UCI benchmark runs.
//!
//! Replications run on a rayon pool sized by `CTMFLOW_THREADS` when set.
//! Every replication derives its own seed from the master seed, so tables
//! do not depend on scheduling. Wall-clock timings go to a separate file to
//! keep result tables reproducible byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ctmflow_core::simlab::{evaluate_replication, neg_pls, DgpSpec, MetricReport};
use ctmflow_core::train::{stream_rng, Stream};
use ctmflow_core::{fit, Dataset, ErrorDistribution, FitConfig, ModelSpec, Target, TermKind, TermSpec};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitSettings;
use crate::error::{CliError, Result};
use crate::io::{write_json, write_records, Table};

/// Worker pool honouring `CTMFLOW_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CTMFLOW_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("CTMFLOW_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(e.to_string()))
}

/// SplitMix64 finalizer folded over the parts.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSuite {
    pub master_seed: u64,
    #[serde(default = "default_dgps")]
    pub dgps: Vec<String>,
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default)]
    pub fit: FitSettings,
}

fn default_dgps() -> Vec<String> {
    ["g1_eta1", "g1_eta2", "g2_eta1", "g2_eta2"].iter().map(|s| s.to_string()).collect()
}

fn default_orders() -> Vec<usize> {
    vec![15, 25]
}

fn default_ns() -> Vec<usize> {
    vec![500, 3000]
}

fn default_replications() -> usize {
    20
}

fn default_test_n() -> usize {
    1000
}

impl SimulationSuite {
    pub fn validate(&self) -> Result<()> {
        if self.dgps.is_empty() || self.orders.is_empty() || self.ns.is_empty() || self.replications == 0 {
            return Err(CliError::Config("suite needs at least one process, order, n and replication".into()));
        }
        for name in &self.dgps {
            DgpSpec::standard(name, 1, 0)?;
        }
        if self.test_n == 0 {
            return Err(CliError::Config("test_n must be positive".into()));
        }
        self.fit.to_fit_config().validate()?;
        Ok(())
    }
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub dgp: String,
    pub order: usize,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub result: std::result::Result<MetricReport, String>,
}

impl SimRow {
    pub fn h2_metric(&self) -> Option<f64> {
        self.result.as_ref().ok().and_then(|r| r.metrics_h2.first().map(|m| m.value))
    }
}

/// Runs the grid; failures are recorded per row and the suite continues.
pub fn run_simulation_suite(suite: &SimulationSuite) -> Result<Vec<SimRow>> {
    suite.validate()?;
    let mut cells = Vec::new();
    for (d, dgp) in suite.dgps.iter().enumerate() {
        for &order in &suite.orders {
            for &n in &suite.ns {
                for rep in 0..suite.replications {
                    // data depend on (process, n, replication) only, so orders share samples
                    let seed = mix_seed(&[suite.master_seed, d as u64, n as u64, rep as u64]);
                    cells.push((dgp.clone(), order, n, rep, seed));
                }
            }
        }
    }
    let base = suite.fit.to_fit_config();
    let pool = thread_pool()?;
    let mut rows: Vec<SimRow> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|(dgp, order, n, replication, seed)| {
                let start = Instant::now();
                let config = FitConfig { seed, ..base.clone() };
                let result = DgpSpec::standard(&dgp, n, seed)
                    .and_then(|spec| evaluate_replication(&spec, order, &config, suite.test_n))
                    .map(|mut r| {
                        r.runtime_seconds = start.elapsed().as_secs_f64();
                        r
                    })
                    .map_err(|e| e.to_string());
                SimRow { dgp, order, n, replication, seed, result }
            })
            .collect()
    });
    rows.sort_by(|a, b| (&a.dgp, a.order, a.n, a.replication).cmp(&(&b.dgp, b.order, b.n, b.replication)));
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Median metrics per (process, order, n) over successful replications.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub dgp: String,
    pub order: usize,
    pub n: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub median_rimse_h1: f64,
    pub median_h2: f64,
    pub median_neg_pls: f64,
}

pub fn summarize(rows: &[SimRow]) -> Vec<SimSummary> {
    let mut keys: Vec<(String, usize, usize)> = rows.iter().map(|r| (r.dgp.clone(), r.order, r.n)).collect();
    keys.dedup();
    keys.into_iter()
        .map(|(dgp, order, n)| {
            let group: Vec<&SimRow> = rows.iter().filter(|r| r.dgp == dgp && r.order == order && r.n == n).collect();
            let ok: Vec<&MetricReport> = group.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let mut rimse: Vec<f64> = ok.iter().map(|r| r.rimse_h1).collect();
            let mut h2: Vec<f64> = group.iter().filter_map(|r| r.h2_metric()).collect();
            let mut pls: Vec<f64> = ok.iter().map(|r| r.neg_pls).collect();
            SimSummary {
                succeeded: ok.len(),
                failed: group.len() - ok.len(),
                median_rimse_h1: median(&mut rimse),
                median_h2: median(&mut h2),
                median_neg_pls: median(&mut pls),
                dgp,
                order,
                n,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SuiteMetadata<'a, C> {
    kind: &'a str,
    master_seed: u64,
    version: &'a str,
    config: &'a C,
}

/// Writes `results.csv`, `summary.csv`, `timings.csv` and `metadata.json` into `dir`.
pub fn write_simulation_tables(dir: &Path, suite: &SimulationSuite, rows: &[SimRow]) -> Result<Vec<PathBuf>> {
    let results = dir.join("results.csv");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.dgp.clone(), r.order.to_string(), r.n.to_string(), r.replication.to_string(), r.seed.to_string()];
            match &r.result {
                Ok(m) => {
                    let h2 = m.metrics_h2.first();
                    v.extend([
                        "ok".to_string(),
                        m.rimse_h1.to_string(),
                        h2.map_or(String::new(), |t| t.kind.clone()),
                        h2.map_or(String::new(), |t| t.value.to_string()),
                        m.neg_pls.to_string(),
                        m.epochs.to_string(),
                        String::new(),
                    ]);
                }
                Err(e) => v.extend(["failed".into(), String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()]),
            }
            v
        })
        .collect();
    write_records(
        &results,
        &["dgp", "M", "n", "replication", "seed", "status", "rimse_h1", "h2_metric", "h2_value", "neg_pls", "epochs", "error"],
        &body,
    )?;
    let summary = dir.join("summary.csv");
    let body: Vec<Vec<String>> = summarize(rows)
        .into_iter()
        .map(|s| {
            vec![
                s.dgp,
                s.order.to_string(),
                s.n.to_string(),
                s.succeeded.to_string(),
                s.failed.to_string(),
                s.median_rimse_h1.to_string(),
                s.median_h2.to_string(),
                s.median_neg_pls.to_string(),
            ]
        })
        .collect();
    write_records(
        &summary,
        &["dgp", "M", "n", "succeeded", "failed", "median_rimse_h1", "median_h2_value", "median_neg_pls"],
        &body,
    )?;
    let timings = dir.join("timings.csv");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dgp.clone(),
                r.order.to_string(),
                r.n.to_string(),
                r.replication.to_string(),
                r.result.as_ref().map_or(String::new(), |m| m.runtime_seconds.to_string()),
            ]
        })
        .collect();
    write_records(&timings, &["dgp", "M", "n", "replication", "runtime_seconds"], &body)?;
    let meta = dir.join("metadata.json");
    write_json(
        &meta,
        &SuiteMetadata { kind: "simulation", master_seed: suite.master_seed, version: env!("CARGO_PKG_VERSION"), config: suite },
    )?;
    Ok(vec![results, summary, timings, meta])
}

/// Column schema of a benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub outcome: String,
    pub features: Vec<String>,
}

impl Manifest {
    /// Built-in schemas: `boston` (506 rows) and `airfoil` (1503 rows).
    pub fn builtin(name: &str) -> Option<Self> {
        let (outcome, features): (&str, &[&str]) = match name {
            "boston" => (
                "medv",
                &["crim", "zn", "indus", "chas", "nox", "rm", "age", "dis", "rad", "tax", "ptratio", "b", "lstat"],
            ),
            "airfoil" => ("sound_pressure", &["frequency", "angle", "chord", "velocity", "thickness"]),
            _ => return None,
        };
        Some(Self { outcome: outcome.into(), features: features.iter().map(|s| s.to_string()).collect() })
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c = self.features.clone();
        c.push(self.outcome.clone());
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkDataset {
    pub name: String,
    pub path: PathBuf,
    /// Overrides the built-in schema, required for names without one.
    #[serde(default)]
    pub manifest: Option<Manifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSuite {
    pub master_seed: u64,
    pub datasets: Vec<BenchmarkDataset>,
    #[serde(default = "default_uci_order")]
    pub order: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub fit: FitSettings,
}

fn default_uci_order() -> usize {
    32
}

fn default_seeds() -> usize {
    5
}

fn default_layers() -> Vec<usize> {
    vec![64, 32]
}

fn default_test_fraction() -> f64 {
    0.2
}

impl BenchmarkDataset {
    pub fn manifest(&self) -> Result<Manifest> {
        self.manifest.clone().or_else(|| Manifest::builtin(&self.name)).ok_or_else(|| {
            CliError::Config(format!("dataset `{}` has no built-in schema; give a manifest with outcome and features", self.name))
        })
    }
}

/// Interacting model for tabular benchmarks: an MLP feeds both the
/// interaction predictor (next to an intercept) and the shift.
pub fn uci_model_spec(features: &[String], order: usize, layers: &[usize]) -> ModelSpec {
    let mut widths = layers.to_vec();
    widths.push(1);
    ModelSpec::new(
        ErrorDistribution::Gaussian,
        order,
        vec![
            TermSpec::new("intercept", Target::Interaction, TermKind::Intercept),
            TermSpec::new("deep_h1", Target::Interaction, TermKind::deep(features.to_vec(), widths.clone())),
            TermSpec::new("deep_h2", Target::Shift, TermKind::deep(features.to_vec(), widths)),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub dataset: String,
    pub seed_index: usize,
    pub seed: u64,
    pub result: std::result::Result<(f64, usize), String>,
    pub runtime_seconds: f64,
}

/// Reads a benchmark CSV; a missing file names the expected path and columns.
pub fn load_benchmark_table(path: &Path, manifest: &Manifest) -> Result<Table> {
    if !path.is_file() {
        return Err(CliError::MissingData { path: path.to_path_buf(), columns: manifest.columns() });
    }
    Table::read(path, Some(&manifest.columns()))
}

/// Per-seed held-out negative log score of one dataset.
pub fn run_uci_benchmark(
    name: &str,
    table: &Table,
    manifest: &Manifest,
    suite: &BenchmarkSuite,
) -> Result<Vec<BenchmarkRun>> {
    let data = table.dataset(&manifest.outcome, &manifest.features)?;
    let spec = uci_model_spec(&manifest.features, suite.order, &suite.layers);
    spec.validate()?;
    if !(suite.test_fraction > 0.0 && suite.test_fraction < 1.0) {
        return Err(CliError::Config("test_fraction must be in (0, 1)".into()));
    }
    let base = suite.fit.to_fit_config();
    base.validate()?;
    let pool = thread_pool()?;
    let runs = pool.install(|| {
        (0..suite.seeds)
            .into_par_iter()
            .map(|k| {
                let seed = mix_seed(&[suite.master_seed, k as u64]);
                let start = Instant::now();
                let result = benchmark_once(&data, &spec, &base, seed, suite.test_fraction).map_err(|e| e.to_string());
                BenchmarkRun {
                    dataset: name.to_string(),
                    seed_index: k,
                    seed,
                    result,
                    runtime_seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(runs)
}

/// Seeded 80/20 split, fit on the larger part, score on the rest.
fn benchmark_once(
    data: &Dataset,
    spec: &ModelSpec,
    base: &FitConfig,
    seed: u64,
    test_fraction: f64,
) -> ctmflow_core::Result<(f64, usize)> {
    let n = data.n();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(mix_seed(&[seed, 0x7e57]), Stream::Split));
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let config = FitConfig { seed, ..base.clone() };
    let (model, log) = fit(spec, &data.select_rows(&train_idx), &config)?;
    let pls = neg_pls(&model, &data.select_rows(&test_idx))?;
    Ok((pls.value, log.epochs.len()))
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Runs every dataset and writes `runs.csv`, `summary.csv`, `timings.csv`, `metadata.json`.
pub fn run_benchmark_suite(suite: &BenchmarkSuite, out: &Path) -> Result<Vec<BenchmarkRun>> {
    let mut all = Vec::new();
    for ds in &suite.datasets {
        let manifest = ds.manifest()?;
        let table = load_benchmark_table(&ds.path, &manifest)?;
        all.extend(run_uci_benchmark(&ds.name, &table, &manifest, suite)?);
    }
    let runs: Vec<Vec<String>> = all
        .iter()
        .map(|r| {
            let (status, pls, epochs, err) = match &r.result {
                Ok((p, e)) => ("ok", p.to_string(), e.to_string(), String::new()),
                Err(e) => ("failed", String::new(), String::new(), e.clone()),
            };
            vec![r.dataset.clone(), r.seed_index.to_string(), r.seed.to_string(), status.into(), pls, epochs, err]
        })
        .collect();
    write_records(out.join("runs.csv"), &["dataset", "seed_index", "seed", "status", "neg_pls", "epochs", "error"], &runs)?;
    let summary: Vec<Vec<String>> = suite
        .datasets
        .iter()
        .map(|ds| {
            let vals: Vec<f64> =
                all.iter().filter(|r| r.dataset == ds.name).filter_map(|r| r.result.as_ref().ok().map(|x| x.0)).collect();
            let (m, s) = mean_sd(&vals);
            vec![ds.name.clone(), suite.order.to_string(), vals.len().to_string(), m.to_string(), s.to_string()]
        })
        .collect();
    write_records(out.join("summary.csv"), &["dataset", "M", "succeeded", "mean_neg_pls", "sd_neg_pls"], &summary)?;
    let timings: Vec<Vec<String>> =
        all.iter().map(|r| vec![r.dataset.clone(), r.seed_index.to_string(), r.runtime_seconds.to_string()]).collect();
    write_records(out.join("timings.csv"), &["dataset", "seed_index", "runtime_seconds"], &timings)?;
    write_json(
        out.join("metadata.json"),
        &SuiteMetadata { kind: "benchmark", master_seed: suite.master_seed, version: env!("CARGO_PKG_VERSION"), config: suite },
    )?;
    Ok(all)
}
