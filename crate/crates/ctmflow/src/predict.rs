//! Prediction tables: quantiles, CDF and density on an outcome grid.

use ctmflow_core::model::linspace;
use ctmflow_core::{Conditional, DctmModel, Dataset};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Quantiles(Vec<f64>),
    CdfGrid(usize),
    DensityGrid(usize),
}

impl Query {
    /// `quantiles` with comma-separated probabilities, `cdf-grid` or `density-grid`.
    pub fn parse(at: &str, probs: Option<&str>, grid: usize) -> Result<Self> {
        match at {
            "quantiles" => {
                let text = probs.unwrap_or("0.1,0.5,0.9");
                let ps = text
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("bad probability `{s}`"))))
                    .collect::<Result<Vec<f64>>>()?;
                if ps.is_empty() || ps.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(CliError::Config("probabilities must lie in (0, 1)".into()));
                }
                Ok(Query::Quantiles(ps))
            }
            "cdf-grid" | "density-grid" if grid < 2 => Err(CliError::Config("grid needs at least 2 points".into())),
            "cdf-grid" => Ok(Query::CdfGrid(grid)),
            "density-grid" => Ok(Query::DensityGrid(grid)),
            other => Err(CliError::Config(format!(
                "unknown --at `{other}`; use quantiles, cdf-grid or density-grid"
            ))),
        }
    }
}

/// Wide table with one row per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Quantiles that fell outside the outcome support and were set to a bound.
    pub boundary_hits: usize,
}

/// Evaluates `query` for every row of `data`.
pub fn predict(model: &DctmModel, data: &Dataset, query: &Query) -> Result<PredictionTable> {
    let cond = model.conditional(data)?;
    predict_conditional(&cond, model, query)
}

pub fn predict_conditional(cond: &Conditional, model: &DctmModel, query: &Query) -> Result<PredictionTable> {
    let basis = model.basis();
    let mut headers = vec!["row".to_string()];
    let mut rows = Vec::with_capacity(cond.len());
    let mut boundary_hits = 0;
    match query {
        Query::Quantiles(ps) => {
            headers.extend(ps.iter().map(|p| format!("q_{p}")));
            for i in 0..cond.len() {
                let mut row = vec![i as f64];
                for &p in ps {
                    let q = cond.quantile(i, p)?;
                    boundary_hits += q.boundary as usize;
                    row.push(q.value);
                }
                rows.push(row);
            }
        }
        Query::CdfGrid(k) | Query::DensityGrid(k) => {
            let density = matches!(query, Query::DensityGrid(_));
            let ys = linspace(basis.lower(), basis.upper(), *k);
            let tag = if density { "density" } else { "cdf" };
            headers.extend(ys.iter().map(|y| format!("{tag}@{y}")));
            for i in 0..cond.len() {
                let mut row = vec![i as f64];
                row.extend(ys.iter().map(|&y| if density { cond.density(i, y) } else { cond.cdf(i, y) }));
                rows.push(row);
            }
        }
    }
    Ok(PredictionTable { headers, rows, boundary_hits })
}
