//! Simulated data with known transformation functions, and the metrics used
//! to compare fitted models against them.
//!
//! Outcomes follow `g(y) = eta(x) + sigma(x) z` with `z` standard normal, so
//! the true model is `F_Z(h1 + h2)` with `h1 = g(y) / sigma(x)` and
//! `h2 = -eta(x) / sigma(x)` under a Gaussian error law.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, dim_err, CoreError, Result};
use crate::error_dist::ErrorDistribution;
use crate::math;
use crate::model::{Conditional, DctmModel, ModelSpec};
use crate::terms::{Target, TermKind, TermSpec};
use crate::train::{fit, stream_rng, FitConfig, Stream};

/// Resampling above this share of draws aborts the simulation.
pub const MAX_RESAMPLE_RATE: f64 = 0.1;

/// Lower clamp for densities in the log score.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Outcome transformation `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    CubeRoot,
}

impl Link {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Link::Identity => y,
            Link::Log => math::ln(y),
            Link::CubeRoot => math::cbrt(y),
        }
    }

    pub fn inverse(self, t: f64) -> f64 {
        match self {
            Link::Identity => t,
            Link::Log => math::exp(t),
            Link::CubeRoot => t * t * t,
        }
    }

    pub fn deriv(self, y: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => 1.0 / y,
            Link::CubeRoot => {
                let c = math::cbrt(y);
                1.0 / (3.0 * c * c)
            }
        }
    }
}

/// Location predictor `eta(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eta {
    /// `intercept + sum_j coefs[j] x_j`.
    Linear { intercept: f64, coefs: Vec<f64> },
    /// `sin(3 x_1) + x_2`.
    SineSmooth,
}

impl Eta {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Eta::Linear { intercept, coefs } => intercept + coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>(),
            Eta::SineSmooth => math::sin(3.0 * x[0]) + x[1],
        }
    }

    fn min_features(&self) -> usize {
        match self {
            Eta::Linear { coefs, .. } => coefs.len(),
            Eta::SineSmooth => 2,
        }
    }
}

/// Scale `sigma(x) > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Constant(f64),
    /// `exp(sum_j gamma[j] x_j)`.
    ExpLinear(Vec<f64>),
}

impl Sigma {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Sigma::Constant(c) => *c,
            Sigma::ExpLinear(g) => math::exp(g.iter().zip(x).map(|(a, b)| a * b).sum()),
        }
    }

    fn min_features(&self) -> usize {
        match self {
            Sigma::Constant(_) => 0,
            Sigma::ExpLinear(g) => g.len(),
        }
    }
}

/// A data generating process with uniform `[-1, 1]^p` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub link: Link,
    pub eta: Eta,
    pub sigma: Sigma,
    pub features: usize,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    /// The four stand-in processes: links identity and log crossed with a
    /// linear and a smooth location predictor, constant scale.
    pub fn standard(name: &str, n: usize, seed: u64) -> Result<Self> {
        let (link, eta) = match name {
            "g1_eta1" => (Link::Identity, Eta::Linear { intercept: 1.0, coefs: vec![2.0, 0.0] }),
            "g1_eta2" => (Link::Identity, Eta::SineSmooth),
            "g2_eta1" => (Link::Log, Eta::Linear { intercept: 1.0, coefs: vec![2.0, 0.0] }),
            "g2_eta2" => (Link::Log, Eta::SineSmooth),
            "g1_eta1_sigma2" => (Link::Identity, Eta::Linear { intercept: 1.0, coefs: vec![2.0, 0.0] }),
            other => return Err(config_err(format!("unknown process `{other}`"))),
        };
        let sigma = if name.ends_with("sigma2") { Sigma::ExpLinear(vec![0.0, 0.5]) } else { Sigma::Constant(1.0) };
        Ok(Self { name: name.to_string(), link, eta, sigma, features: 2, n, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("a process needs n >= 1"));
        }
        if self.features < self.eta.min_features().max(self.sigma.min_features()) {
            return Err(config_err(format!("process `{}` needs more features", self.name)));
        }
        if let Sigma::Constant(c) = self.sigma {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_err("constant sigma must be positive"));
            }
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.features).map(|j| format!("x{j}")).collect()
    }

    /// True `h1(y | x) = g(y) / sigma(x)`.
    pub fn true_h1(&self, y: f64, x: &[f64]) -> f64 {
        self.link.apply(y) / self.sigma.eval(x)
    }

    /// True `h2(x) = -eta(x) / sigma(x)`.
    pub fn true_h2(&self, x: &[f64]) -> f64 {
        -self.eta.eval(x) / self.sigma.eval(x)
    }

    /// True conditional log density of `y`.
    pub fn log_density(&self, y: f64, x: &[f64]) -> f64 {
        let s = self.sigma.eval(x);
        let z = (self.link.apply(y) - self.eta.eval(x)) / s;
        ErrorDistribution::Gaussian.log_pdf_unchecked(z) + math::ln(self.link.deriv(y).abs() / s)
    }

    /// True shift coefficients of linear features, `-coef / sigma`, for constant scale.
    pub fn true_shift_coefficients(&self) -> Option<Vec<f64>> {
        match (&self.eta, &self.sigma) {
            (Eta::Linear { coefs, .. }, Sigma::Constant(c)) => Some(coefs.iter().map(|b| -b / c).collect()),
            _ => None,
        }
    }

    /// Model spec matching the structure of the process: linear or smooth
    /// shift terms for `eta`, smooth interaction terms where `sigma` varies.
    pub fn model_spec(&self, order: usize) -> ModelSpec {
        let names = self.feature_names();
        let mut terms = vec![TermSpec::new("intercept", Target::Interaction, TermKind::Intercept)];
        if let Sigma::ExpLinear(g) = &self.sigma {
            for (j, gj) in g.iter().enumerate() {
                if *gj != 0.0 {
                    terms.push(TermSpec::new(format!("scale_{}", names[j]), Target::Interaction, TermKind::smooth(&names[j])));
                }
            }
        }
        for (j, name) in names.iter().enumerate() {
            let kind = match &self.eta {
                Eta::Linear { .. } => TermKind::linear(name),
                Eta::SineSmooth if j == 0 => TermKind::smooth(name),
                Eta::SineSmooth => TermKind::linear(name),
            };
            terms.push(TermSpec::new(name.clone(), Target::Shift, kind));
        }
        ModelSpec::new(ErrorDistribution::Gaussian, order, terms)
    }
}

/// Simulated data and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub data: Dataset,
    pub rows: Vec<Vec<f64>>,
    /// Noise draws rejected because `g^{-1}` gave an unusable outcome.
    pub resampled: usize,
}

/// Draws `n` rows; features from the process seed's data stream.
pub fn simulate(spec: &DgpSpec) -> Result<Simulation> {
    simulate_stream(spec, 0)
}

/// As [`simulate`] with an extra offset so test sets differ from training sets.
pub fn simulate_stream(spec: &DgpSpec, offset: u64) -> Result<Simulation> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed.wrapping_add(offset.wrapping_mul(0x9e37_79b9_7f4a_7c15)), Stream::Dgp);
    let unif = Uniform::new(-1.0, 1.0).map_err(|e| CoreError::Numeric(e.to_string()))?;
    let mut rows = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut resampled = 0;
    let budget = math::ceil(spec.n as f64 * MAX_RESAMPLE_RATE) as usize;
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..spec.features).map(|_| unif.sample(&mut rng)).collect();
        let (eta, sigma) = (spec.eta.eval(&x), spec.sigma.eval(&x));
        loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = spec.link.inverse(eta + sigma * z);
            let d = spec.link.deriv(v);
            if v.is_finite() && d.is_finite() && d > 0.0 {
                y.push(v);
                break;
            }
            resampled += 1;
            if resampled > budget {
                return Err(CoreError::Numeric(format!(
                    "process `{}` needed more than {:.0}% resampled draws",
                    spec.name,
                    100.0 * MAX_RESAMPLE_RATE
                )));
            }
        }
        rows.push(x);
    }
    let columns = (0..spec.features).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let data = Dataset::new("y", y, spec.feature_names(), columns)?;
    Ok(Simulation { data, rows, resampled })
}

/// Relative integrated squared error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rimse {
    pub value: f64,
    /// The truth was constant on the grid; `value` is the unscaled mean squared error.
    pub unscaled: bool,
}

/// `mean(((est - truth) / range(truth))^2)` over at least 100 grid points.
pub fn rimse(est: &[f64], truth: &[f64]) -> Result<Rimse> {
    if est.len() != truth.len() {
        return Err(dim_err(format!("{} estimates for {} truth values", est.len(), truth.len())));
    }
    if truth.len() < 100 {
        return Err(config_err(format!("RIMSE needs at least 100 grid points, got {}", truth.len())));
    }
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let unscaled = !(range > 0.0);
    let scale = if unscaled { 1.0 } else { range };
    let value = est.iter().zip(truth).map(|(e, t)| ((e - t) / scale) * ((e - t) / scale)).sum::<f64>() / truth.len() as f64;
    Ok(Rimse { value, unscaled })
}

/// Removes the constant offset between `est` and `truth`: `est - mean(est - truth)`.
///
/// `h1` and `h2` are only identified up to a shared constant.
pub fn align_constant(est: &[f64], truth: &[f64]) -> Vec<f64> {
    let n = est.len().max(1) as f64;
    let offset = est.iter().zip(truth).map(|(e, t)| e - t).sum::<f64>() / n;
    est.iter().map(|e| e - offset).collect()
}

pub fn coefficient_mse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(dim_err(format!("{} estimates for {} coefficients", est.len(), truth.len())));
    }
    if est.is_empty() {
        return Err(dim_err("no coefficients to compare"));
    }
    Ok(est.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum::<f64>() / est.len() as f64)
}

/// Negative predicted log score with its clamp count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pls {
    pub value: f64,
    /// Rows whose density fell below [`DENSITY_FLOOR`].
    pub clamped: usize,
    /// Rows whose outcome lay outside the fitted outcome interval.
    pub outside_support: usize,
}

/// `-mean(log f(y_i | x_i))` on rows with an outcome.
pub fn neg_pls(model: &DctmModel, test: &Dataset) -> Result<Pls> {
    let y = test.outcome().ok_or_else(|| config_err("the test data need an outcome column"))?;
    let cond = model.conditional(test)?;
    Ok(neg_pls_conditional(&cond, y))
}

pub fn neg_pls_conditional(cond: &Conditional, y: &[f64]) -> Pls {
    let floor = math::ln(DENSITY_FLOOR);
    let mut clamped = 0;
    let mut outside = 0;
    let mut total = 0.0;
    for (i, &v) in y.iter().enumerate() {
        if cond.basis().normalize(v).1 {
            outside += 1;
        }
        let ld = cond.log_density(i, v);
        total += if ld < floor || ld.is_nan() {
            clamped += 1;
            floor
        } else {
            ld
        };
    }
    Pls { value: -total / y.len().max(1) as f64, clamped, outside_support: outside }
}

/// Metrics for one shift term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMetric {
    pub term: String,
    /// `"mse"` for linear coefficients, `"rimse"` for functions.
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rimse_h1: f64,
    pub metrics_h2: Vec<TermMetric>,
    pub neg_pls: f64,
    pub runtime_seconds: f64,
    pub epochs: usize,
}

/// Evaluation grid for `h1`: 11 training rows at the `sigma(x)` deciles
/// crossed with the 101 percentiles of the training outcomes.
pub fn h1_grid(spec: &DgpSpec, sim: &Simulation) -> (Vec<usize>, Vec<f64>) {
    let n = sim.rows.len();
    let mut by_sigma: Vec<usize> = (0..n).collect();
    by_sigma.sort_by(|&a, &b| spec.sigma.eval(&sim.rows[a]).total_cmp(&spec.sigma.eval(&sim.rows[b])).then(a.cmp(&b)));
    let rows = (0..=10).map(|k| by_sigma[math::round(k as f64 / 10.0 * (n - 1) as f64) as usize]).collect();
    let mut ys = sim.data.outcome().expect("simulated outcome").to_vec();
    ys.sort_by(f64::total_cmp);
    let grid = (0..=100).map(|k| ys[math::round(k as f64 / 100.0 * (n - 1) as f64) as usize]).collect();
    (rows, grid)
}

/// Fits the process's model and scores it against the truth.
///
/// `h1` and `h2` estimates are aligned to the truth by one constant before
/// RIMSE; the log score uses an independent test sample of `test_n` rows.
pub fn evaluate_replication(spec: &DgpSpec, order: usize, config: &FitConfig, test_n: usize) -> Result<MetricReport> {
    let sim = simulate(spec)?;
    let model_spec = spec.model_spec(order);
    let (model, log) = fit(&model_spec, &sim.data, config)?;
    let train_cond = model.conditional(&sim.data)?;

    let (rows, ys) = h1_grid(spec, &sim);
    let mut est = Vec::with_capacity(rows.len() * ys.len());
    let mut truth = Vec::with_capacity(est.capacity());
    for &r in &rows {
        for &y in &ys {
            est.push(train_cond.h1(r, y));
            truth.push(spec.true_h1(y, &sim.rows[r]));
        }
    }
    let rimse_h1 = rimse(&align_constant(&est, &truth), &truth)?.value;

    let mut metrics_h2 = Vec::new();
    let names = spec.feature_names();
    match (&spec.eta, spec.true_shift_coefficients()) {
        (Eta::Linear { .. }, Some(true_coefs)) => {
            let est: Vec<f64> = names
                .iter()
                .map(|nm| model.shift_coefficients(nm).map_or(f64::NAN, |c| c[0]))
                .collect();
            metrics_h2.push(TermMetric { term: "linear".into(), kind: "mse".into(), value: coefficient_mse(&est, &true_coefs)? });
        }
        _ => {
            let est: Vec<f64> = (0..sim.rows.len()).map(|i| train_cond.beta(i)).collect();
            let truth: Vec<f64> = sim.rows.iter().map(|x| spec.true_h2(x)).collect();
            let value = rimse(&align_constant(&est, &truth), &truth)?.value;
            metrics_h2.push(TermMetric { term: "h2".into(), kind: "rimse".into(), value });
        }
    }

    let test_spec = DgpSpec { n: test_n, ..spec.clone() };
    let test = simulate_stream(&test_spec, 1)?;
    let pls = neg_pls(&model, &test.data)?;
    Ok(MetricReport { rimse_h1, metrics_h2, neg_pls: pls.value, runtime_seconds: 0.0, epochs: log.epochs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BernsteinBasis;
    use crate::linalg::Matrix;

    fn g1_eta1(n: usize, seed: u64) -> DgpSpec {
        DgpSpec::standard("g1_eta1", n, seed).unwrap()
    }

    #[test]
    fn simulate_examples() {
        let spec = g1_eta1(500, 3);
        assert_eq!(spec.true_h2(&[0.0, 0.0]), -1.0);
        assert_eq!(spec.true_h2(&[0.5, 0.3]), -2.0);
        assert_eq!(spec.true_h1(0.7, &[0.1, 0.2]), 0.7);
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, simulate(&g1_eta1(500, 4)).unwrap().data);
        let resid: Vec<f64> =
            a.rows.iter().zip(a.data.outcome().unwrap()).map(|(x, y)| y - spec.eta.eval(x)).collect();
        let mean = resid.iter().sum::<f64>() / 500.0;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 499.0;
        assert!(mean.abs() < 0.15 && (var - 1.0).abs() < 0.2);
    }

    #[test]
    fn log_link_outcomes_are_positive() {
        let s = simulate(&DgpSpec::standard("g2_eta2", 300, 1).unwrap()).unwrap();
        assert!(s.data.outcome().unwrap().iter().all(|&y| y > 0.0));
        assert_eq!(s.resampled, 0);
    }

    #[test]
    fn rimse_examples() {
        let truth: Vec<f64> = (0..100).map(|i| (i as f64 / 10.0).sin()).collect();
        let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        assert_eq!(rimse(&truth, &truth).unwrap().value, 0.0);
        let off: Vec<f64> = truth.iter().map(|t| t + range).collect();
        assert!((rimse(&off, &truth).unwrap().value - 1.0).abs() < 1e-12);
        let off: Vec<f64> = truth.iter().map(|t| t + 0.1 * range).collect();
        assert!((rimse(&off, &truth).unwrap().value - 0.01).abs() < 1e-12);
        let flat = vec![2.0; 100];
        let r = rimse(&vec![3.0; 100], &flat).unwrap();
        assert!(r.unscaled && r.value == 1.0);
        assert!(rimse(&truth[..50], &truth[..50]).is_err());
        assert!(align_constant(&off, &truth).iter().zip(&truth).all(|(a, t)| (a - t).abs() < 1e-12));
    }

    #[test]
    fn rimse_is_scale_invariant() {
        let truth: Vec<f64> = (0..120).map(|i| (i as f64).sqrt()).collect();
        let est: Vec<f64> = truth.iter().map(|t| t * 1.1 + 0.2).collect();
        let base = rimse(&est, &truth).unwrap().value;
        for c in [0.01, 3.0, 1e4] {
            let e: Vec<f64> = est.iter().map(|v| v * c).collect();
            let t: Vec<f64> = truth.iter().map(|v| v * c).collect();
            assert!((rimse(&e, &t).unwrap().value - base).abs() < 1e-12 * base.max(1.0));
        }
    }

    #[test]
    fn coefficient_mse_examples() {
        assert_eq!(coefficient_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(coefficient_mse(&[1.0, 2.0], &[0.0, 2.0]).unwrap(), 0.5);
        let t = [1.5, -2.0, 0.5];
        let flipped: Vec<f64> = t.iter().map(|v| -v).collect();
        let expect = 4.0 * t.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((coefficient_mse(&flipped, &t).unwrap() - expect).abs() < 1e-12);
        assert!(coefficient_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn neg_pls_examples() {
        // h(y) = y on [-4, 4]: density is standard normal
        let basis = BernsteinBasis::new(1, -4.0, 4.0).unwrap();
        let theta = Matrix::from_rows(&[vec![-4.0, 4.0], vec![-4.0, 4.0]]).unwrap();
        let cond = Conditional::from_parts(basis, ErrorDistribution::Gaussian, theta, vec![0.0, 0.0]).unwrap();
        let pls = neg_pls_conditional(&cond, &[0.0, 0.0]);
        assert!((pls.value - 0.918_938_533_204_672_8).abs() < 1e-12);
        // a steep transformation concentrates mass: strongly negative score
        let theta = Matrix::from_rows(&[vec![-4000.0, 4000.0]]).unwrap();
        let sharp = Conditional::from_parts(basis, ErrorDistribution::Gaussian, theta, vec![0.0]).unwrap();
        assert!(neg_pls_conditional(&sharp, &[0.0]).value < -5.0);
        let far = neg_pls_conditional(&sharp, &[3.0]);
        assert_eq!(far.clamped, 1);
        assert!(far.value.is_finite());
    }

    #[test]
    fn true_transformation_reproduces_generating_density() {
        let spec = DgpSpec { sigma: Sigma::ExpLinear(vec![0.0, 0.5]), ..g1_eta1(2000, 8) };
        let sim = simulate(&spec).unwrap();
        let y = sim.data.outcome().unwrap();
        let mut via_h = Vec::new();
        let mut direct = Vec::new();
        for (x, &v) in sim.rows.iter().zip(y) {
            let z = spec.true_h1(v, x) + spec.true_h2(x);
            let jac = spec.link.deriv(v) / spec.sigma.eval(x);
            via_h.push(-ErrorDistribution::Gaussian.log_pdf_unchecked(z) - jac.ln());
            direct.push(-spec.log_density(v, x));
        }
        let n = via_h.len() as f64;
        let mean_h = via_h.iter().sum::<f64>() / n;
        let mean_d = direct.iter().sum::<f64>() / n;
        let sd = (via_h.iter().map(|v| (v - mean_h) * (v - mean_h)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean_h - mean_d).abs() < 3.0 * sd / n.sqrt());
        // entropy of N(0, 1) plus E[log sigma(x)]
        let e_log_sigma = sim.rows.iter().map(|x| spec.sigma.eval(x).ln()).sum::<f64>() / n;
        let entropy = 0.5 * (1.0 + (2.0 * core::f64::consts::PI).ln());
        assert!((mean_h - (entropy + e_log_sigma)).abs() < 3.0 * sd / n.sqrt());
    }

    #[test]
    fn grid_has_expected_shape() {
        let spec = DgpSpec { sigma: Sigma::ExpLinear(vec![0.0, 0.5]), ..g1_eta1(300, 2) };
        let sim = simulate(&spec).unwrap();
        let (rows, ys) = h1_grid(&spec, &sim);
        assert_eq!((rows.len(), ys.len()), (11, 101));
        let s: Vec<f64> = rows.iter().map(|&r| spec.sigma.eval(&sim.rows[r])).collect();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
    }
}
