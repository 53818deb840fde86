//! Penalized maximum likelihood with Adam, early stopping, smoothing
//! calibration from degrees of freedom, and gradient verification.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BernsteinBasis, PenaltyMatrix};
use crate::data::Dataset;
use crate::error::{config_err, CoreError, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::math;
use crate::model::{DctmModel, Layout, ModelSpec, Objective, Params};
use crate::terms::{evaluate_block, BlockWarnings, Side, Target, TermSpec};

/// Epochs in a row with a non-finite loss before training is abandoned.
pub const DIVERGENCE_EPOCHS: usize = 5;

/// Bounds of the `log10(lambda)` search.
pub const LAMBDA_MAX: f64 = 1e12;
pub const LOG10_LAMBDA_RANGE: (f64, f64) = (-12.0, 12.0);

/// Random sub-streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Batch = 3,
    Dgp = 4,
}

/// Generator for one named sub-stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Rows(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_epochs: usize,
    /// `None` picks full batch for structured models and 32 rows with deep terms.
    pub batch_size: Option<BatchSize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            batch_size: None,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            val_fraction: 0.2,
            patience: 20,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(config_err(format!("val_fraction must be in [0, 0.5], got {}", self.val_fraction)));
        }
        if self.patience < 1 {
            return Err(config_err("patience must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(config_err("max_epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(config_err("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if let Some(BatchSize::Rows(0)) = self.batch_size {
            return Err(config_err("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn resolved_batch(&self, spec: &ModelSpec) -> BatchSize {
        self.batch_size.unwrap_or(if spec.has_deep() { BatchSize::Rows(32) } else { BatchSize::Full })
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, config: &FitConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - math::powi(self.beta1, self.t);
        let c2 = 1.0 - math::powi(self.beta2, self.t);
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            theta[k] -= self.lr * mh / (math::sqrt(vh) + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Penalized loss on the training rows.
    pub train_loss: f64,
    /// Negative log-likelihood on the validation rows.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    Explicit,
    Df,
    Equalized,
}

/// Smoothing parameter chosen for one penalized block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingChoice {
    pub term: String,
    pub side: Side,
    pub lambda: f64,
    pub df: Option<f64>,
    pub source: LambdaSource,
    /// The search hit the upper bound of `lambda`.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stop_reason: StopReason,
    /// Jacobian-floor hits on training rows with the returned parameters.
    pub jacobian_violations: usize,
    pub smoothing: Vec<SmoothingChoice>,
    pub warnings: BlockWarnings,
    pub train_rows: usize,
    pub val_rows: usize,
}

/// Fits a model by minimizing the penalized mean negative log-likelihood.
///
/// The outcome interval, knots, centering and shifts come from all rows of
/// `data`; a seeded uniform split then holds out `val_fraction` of them for
/// early stopping. The parameters of the best monitored epoch are returned.
pub fn fit(spec: &ModelSpec, data: &Dataset, config: &FitConfig) -> Result<(DctmModel, TrainingLog)> {
    spec.validate()?;
    config.validate()?;
    let y = data.outcome().ok_or_else(|| config_err("training data need an outcome column"))?;
    if data.n() < 20 {
        return Err(config_err(format!("fitting needs at least 20 rows, got {}", data.n())));
    }
    let basis = BernsteinBasis::from_outcomes(spec.order, y)?;
    let (mut layout, warnings) = Layout::from_training_data(spec, basis, data)?;
    let smoothing = calibrate_smoothing(&mut layout, spec, data)?;

    let n = data.n();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(config.seed, Stream::Split));
    let n_val = (math::round(config.val_fraction * n as f64) as usize).min(n - 1);
    let mut val_idx = idx[..n_val].to_vec();
    let mut train_idx = idx[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let batch = config.resolved_batch(spec);
    if layout.has_orthogonalized() && batch != BatchSize::Full {
        return Err(config_err("orthogonalized deep terms need full-batch training (batch_size \"full\")"));
    }

    let design = layout.design(data)?;
    let train_design = design.select_rows(&train_idx);
    let val_design = design.select_rows(&val_idx);
    let n_train = train_idx.len();

    let mut params = layout.init_params(&train_design, &mut stream_rng(config.seed, Stream::Init))?;
    let mut batch_rng = stream_rng(config.seed, Stream::Batch);

    let (best_params, log_core) = {
        let objective = Objective::new(&layout, train_design.clone(), n_train)?;
        let mut val_objective =
            if n_val > 0 { Some(Objective::new(&layout, val_design, n_train)?) } else { None };
        let mut adam = Adam::new(params.len(), config);
        let mut theta = params.flatten();
        let mut best = (f64::INFINITY, params.clone(), 0_usize);
        let mut since_best = 0;
        let mut nonfinite = 0;
        let mut epochs = Vec::new();
        let mut stop_reason = StopReason::MaxEpochs;
        for epoch in 1..=config.max_epochs {
            match batch {
                BatchSize::Full => {
                    let (_, grad) = objective.loss_and_grad(&params)?;
                    if grad.iter().all(|g| g.is_finite()) {
                        adam.step(&mut theta, &grad);
                        params.assign(&theta)?;
                    }
                }
                BatchSize::Rows(size) => {
                    let mut order: Vec<usize> = (0..n_train).collect();
                    order.shuffle(&mut batch_rng);
                    for chunk in order.chunks(size) {
                        let sub = Objective::new(&layout, train_design.select_rows(chunk), n_train)?;
                        let (_, grad) = sub.loss_and_grad(&params)?;
                        if grad.iter().all(|g| g.is_finite()) {
                            adam.step(&mut theta, &grad);
                            params.assign(&theta)?;
                        }
                    }
                }
            }
            let train_loss = objective.loss(&params)?.total;
            let val_loss = match val_objective.as_mut() {
                Some(vo) => {
                    if layout.has_orthogonalized() {
                        vo.set_orth_weights(objective.orth_weights(&params)?);
                    }
                    Some(vo.loss(&params)?.nll)
                }
                None => None,
            };
            epochs.push(EpochRecord { epoch, train_loss, val_loss });
            let monitored = val_loss.unwrap_or(train_loss);
            if !monitored.is_finite() || !params.is_finite() {
                nonfinite += 1;
                if nonfinite >= DIVERGENCE_EPOCHS {
                    return Err(CoreError::Diverged(format!(
                        "loss non-finite for {DIVERGENCE_EPOCHS} consecutive epochs (last at epoch {epoch}, \
                         best epoch {} with loss {}); try a smaller learning_rate",
                        best.2, best.0
                    )));
                }
            } else {
                nonfinite = 0;
            }
            if monitored < best.0 {
                best = (monitored, params.clone(), epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stop_reason = StopReason::EarlyStopping;
                    break;
                }
            }
        }
        if best.2 == 0 {
            return Err(CoreError::Diverged("no epoch produced a finite loss".into()));
        }
        let weights = objective.orth_weights(&best.1)?;
        let violations = objective.loss(&best.1)?.violations.len();
        (best.1, (epochs, best.2, best.0, stop_reason, weights, violations))
    };
    let (epochs, best_epoch, best_loss, stop_reason, weights, violations) = log_core;
    let model = DctmModel::from_parts(spec.clone(), layout, best_params, weights, violations)?;
    let log = TrainingLog {
        epochs,
        best_epoch,
        best_loss,
        stop_reason,
        jacobian_violations: violations,
        smoothing,
        warnings,
        train_rows: n_train,
        val_rows: n_val,
    };
    Ok((model, log))
}

/// Degrees-of-freedom curve `df(lambda) = sum_i 1 / (1 + lambda d_i)` of a
/// penalized design, from the Demmler-Reinsch eigenvalues `d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DfCurve {
    eigenvalues: Vec<f64>,
    null_count: usize,
}

impl DfCurve {
    /// Restricts to the column space of `design`: with `X^T X = V L V^T`,
    /// `R = V_r L_r^{-1/2}` and `d = eig(R^T D R)`.
    pub fn new(design: &Matrix, penalty: &PenaltyMatrix) -> Result<Self> {
        if design.ncols() != penalty.dim() {
            return Err(config_err(format!(
                "design has {} columns, penalty is {}x{}",
                design.ncols(),
                penalty.dim(),
                penalty.dim()
            )));
        }
        let xtx = design.t_matmul(design)?;
        let (vals, vecs) = symmetric_eigen(&xtx);
        let top = vals.iter().copied().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 1e-10 * top).collect();
        if keep.is_empty() {
            return Err(CoreError::Numeric("design has rank zero".into()));
        }
        let r = Matrix::from_fn(design.ncols(), keep.len(), |i, j| vecs[(i, keep[j])] / math::sqrt(vals[keep[j]]));
        let s = r.t_matmul(&penalty.entries().matmul(&r)?)?;
        let (d, _) = symmetric_eigen(&s);
        let dmax = d.iter().copied().fold(0.0_f64, f64::max);
        let eigenvalues: Vec<f64> = d.into_iter().map(|v| if v > 1e-10 * dmax { v } else { 0.0 }).collect();
        let null_count = eigenvalues.iter().filter(|&&v| v == 0.0).count();
        Ok(Self { eigenvalues, null_count })
    }

    pub fn df(&self, lambda: f64) -> f64 {
        self.eigenvalues.iter().map(|d| 1.0 / (1.0 + lambda * d)).sum()
    }

    /// Rank of the design: the unpenalized degrees of freedom.
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Degrees of freedom left as `lambda` grows without bound.
    pub fn min_df(&self) -> usize {
        self.null_count
    }
}

/// A smoothing parameter and the degrees of freedom it attains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub lambda: f64,
    pub df: f64,
    /// The target needed `lambda` beyond the search range; the upper bound is returned.
    pub capped: bool,
}

/// Finds `lambda` with `df(lambda) = df_target` by bisection on `log10(lambda)`.
pub fn df_to_lambda(design: &Matrix, penalty: &PenaltyMatrix, df_target: f64) -> Result<Calibration> {
    let curve = DfCurve::new(design, penalty)?;
    calibrate_curve(&curve, df_target)
}

fn calibrate_curve(curve: &DfCurve, df_target: f64) -> Result<Calibration> {
    let rank = curve.rank() as f64;
    let lo_df = curve.min_df() as f64;
    if !(df_target >= lo_df - 1e-9 && df_target <= rank + 1e-9) {
        return Err(CoreError::OutOfRange(format!(
            "df target {df_target} outside the attainable range [{lo_df}, {rank}]"
        )));
    }
    if df_target >= rank - 1e-12 {
        return Ok(Calibration { lambda: 0.0, df: rank, capped: false });
    }
    let (mut a, mut b) = LOG10_LAMBDA_RANGE;
    let upper = LAMBDA_MAX;
    if df_target <= lo_df + 1e-9 || curve.df(upper) > df_target {
        return Ok(Calibration { lambda: upper, df: curve.df(upper), capped: true });
    }
    let lower = math::exp(a * core::f64::consts::LN_10);
    if curve.df(lower) < df_target {
        return Ok(Calibration { lambda: lower, df: curve.df(lower), capped: false });
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let lambda = math::exp(mid * core::f64::consts::LN_10);
        let df = curve.df(lambda);
        if (df - df_target).abs() < 1e-12 {
            a = mid;
            b = mid;
            break;
        }
        // df decreases in lambda
        if df > df_target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let lambda = math::exp(0.5 * (a + b) * core::f64::consts::LN_10);
    Ok(Calibration { lambda, df: curve.df(lambda), capped: false })
}

/// Leaves the least flexible term unpenalized and calibrates every other
/// term to the same degrees of freedom.
///
/// Flexibility is the rank of a term's design. Targets below a term's
/// penalty nullspace are raised to that floor.
pub fn equalize_flexibility(terms: &[(&Matrix, &PenaltyMatrix)]) -> Result<Vec<Calibration>> {
    let curves: Vec<DfCurve> = terms.iter().map(|(d, p)| DfCurve::new(d, p)).collect::<Result<_>>()?;
    let Some(target) = curves.iter().map(DfCurve::rank).min() else {
        return Ok(Vec::new());
    };
    curves
        .iter()
        .map(|c| {
            if c.rank() == target {
                Ok(Calibration { lambda: 0.0, df: c.rank() as f64, capped: false })
            } else {
                calibrate_curve(c, (target as f64).max(c.min_df() as f64))
            }
        })
        .collect()
}

/// Sets `lambda` on every penalized block: an explicit value wins, then a
/// requested df, and the remaining blocks are equalized together.
pub fn calibrate_smoothing(layout: &mut Layout, spec: &ModelSpec, data: &Dataset) -> Result<Vec<SmoothingChoice>> {
    let mut choices = Vec::new();
    let mut pending: Vec<(Side, usize, Matrix, PenaltyMatrix)> = Vec::new();
    for side in [Side::Interaction, Side::Shift] {
        let states = match side {
            Side::Interaction => &mut layout.interaction,
            Side::Shift => &mut layout.shift,
        };
        for (k, state) in states.iter_mut().enumerate() {
            let Some(penalty) = state.penalty.clone() else { continue };
            let term = spec.terms.iter().find(|t| t.name == state.name).expect("state from spec");
            if let Some(lambda) = term.kind.lambda() {
                state.lambda = lambda;
                choices.push(SmoothingChoice {
                    term: state.name.clone(),
                    side,
                    lambda,
                    df: None,
                    source: LambdaSource::Explicit,
                    capped: false,
                });
                continue;
            }
            let replay = TermSpec::new(state.name.clone(), side_target(side), state.kind.clone());
            let (block, _) = evaluate_block(&replay, side, data, Some(state))?;
            if let Some(df) = term.kind.df() {
                let c = df_to_lambda(&block.columns, &penalty, df).map_err(|e| match e {
                    CoreError::OutOfRange(msg) => config_err(format!("term `{}`: {msg}", state.name)),
                    other => other,
                })?;
                state.lambda = c.lambda;
                choices.push(SmoothingChoice {
                    term: state.name.clone(),
                    side,
                    lambda: c.lambda,
                    df: Some(c.df),
                    source: LambdaSource::Df,
                    capped: c.capped,
                });
            } else {
                pending.push((side, k, block.columns, penalty));
            }
        }
    }
    let refs: Vec<(&Matrix, &PenaltyMatrix)> = pending.iter().map(|(_, _, d, p)| (d, p)).collect();
    let cals = equalize_flexibility(&refs)?;
    for ((side, k, _, _), c) in pending.iter().zip(cals) {
        let state = match side {
            Side::Interaction => &mut layout.interaction[*k],
            Side::Shift => &mut layout.shift[*k],
        };
        state.lambda = c.lambda;
        choices.push(SmoothingChoice {
            term: state.name.clone(),
            side: *side,
            lambda: c.lambda,
            df: Some(c.df),
            source: LambdaSource::Equalized,
            capped: c.capped,
        });
    }
    Ok(choices)
}

fn side_target(side: Side) -> Target {
    match side {
        Side::Interaction => Target::Interaction,
        Side::Shift => Target::Shift,
    }
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub params: usize,
    pub tolerance: f64,
    pub pass: bool,
    /// Network parameters skipped because a relu switched inside the stencil.
    pub kinks: usize,
}

/// Relative deviations below this denominator are measured in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central differences with step `1e-5 * max(1, |theta_k|)` against `analytic`.
///
/// A network parameter whose forward and backward slopes disagree sits on a
/// relu kink, where the loss has no derivative; it is counted and skipped.
pub fn compare_gradients(objective: &Objective<'_>, params: &Params, analytic: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    let theta = params.flatten();
    if analytic.len() != theta.len() {
        return Err(config_err("analytic gradient length differs from the parameter count"));
    }
    let base = objective.loss(params)?.total;
    let first_net = params.gamma_raw.as_slice().len() + params.psi.len();
    let mut probe = params.clone();
    let mut t = theta.clone();
    let mut worst = (0.0_f64, 0_usize);
    let mut kinks = 0;
    for k in 0..theta.len() {
        let h = 1e-5 * theta[k].abs().max(1.0);
        t[k] = theta[k] + h;
        probe.assign(&t)?;
        let lp = objective.loss(&probe)?.total;
        t[k] = theta[k] - h;
        probe.assign(&t)?;
        let lm = objective.loss(&probe)?.total;
        t[k] = theta[k];
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(GRAD_CHECK_FLOOR);
        let one_sided_gap = ((lp - base) / h - (base - lm) / h).abs();
        if k >= first_net && !(rel < tolerance) && one_sided_gap > 1e-3 * fd.abs().max(1.0) {
            kinks += 1;
            continue;
        }
        if !(rel <= worst.0) {
            worst = (rel, k);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        params: theta.len(),
        tolerance,
        pass: worst.0 < tolerance,
        kinks,
    })
}

/// Checks the closed-form and tape gradients of the penalized loss.
pub fn grad_check(objective: &Objective<'_>, params: &Params, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grad) = objective.loss_and_grad(params)?;
    compare_gradients(objective, params, &grad, tolerance)
}

/// Builds a model on `data` and perturbs its starting values, so gradient
/// checks do not run at a symmetric point. Smoothing parameters follow the
/// spec; unset ones are equalized.
pub fn grad_check_setup(spec: &ModelSpec, data: &Dataset, seed: u64) -> Result<(Layout, Params)> {
    use rand_distr::{Distribution, StandardNormal};
    spec.validate()?;
    let y = data.outcome().ok_or_else(|| config_err("gradient checks need an outcome column"))?;
    let basis = BernsteinBasis::from_outcomes(spec.order, y)?;
    let (mut layout, _) = Layout::from_training_data(spec, basis, data)?;
    calibrate_smoothing(&mut layout, spec, data)?;
    let design = layout.design(data)?;
    let mut rng = stream_rng(seed, Stream::Init);
    let mut params = layout.init_params(&design, &mut rng)?;
    let mut theta = params.flatten();
    let fixed = params.gamma_raw.as_slice().len() + params.psi.len();
    for v in theta.iter_mut().take(fixed) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.1 * z;
    }
    params.assign(&theta)?;
    Ok((layout, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{difference_penalty, SplineBasis};
    use crate::error_dist::ErrorDistribution;
    use crate::terms::TermKind;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn smoother_trace(design: &Matrix, penalty: &PenaltyMatrix, lambda: f64) -> f64 {
        // tr((X^T X + lambda D)^{-1} X^T X) by a direct solve
        let xtx = design.t_matmul(design).unwrap();
        let lhs = xtx.add(&penalty.entries().scale(lambda)).unwrap().to_nalgebra();
        let sol = lhs.lu().solve(&xtx.to_nalgebra()).unwrap();
        sol.trace()
    }

    fn spline_design(seed: u64, n: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| Uniform::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        SplineBasis::equidistant(0.0, 1.0, 10, 3, 2).unwrap().eval(&x).unwrap().values
    }

    #[test]
    fn df_calibration_matches_direct_trace() {
        let d = difference_penalty(10, 2).unwrap();
        for seed in 0..5 {
            let x = spline_design(seed, 200);
            for df in [3.0, 5.0, 8.0] {
                let c = df_to_lambda(&x, &d, df).unwrap();
                assert!(!c.capped);
                assert!((c.df - df).abs() < 1e-6);
                assert!((smoother_trace(&x, &d, c.lambda) - df).abs() < 1e-4, "seed {seed} df {df}");
            }
        }
    }

    #[test]
    fn df_calibration_limits() {
        let d = difference_penalty(10, 2).unwrap();
        let x = spline_design(1, 200);
        assert_eq!(df_to_lambda(&x, &d, 10.0).unwrap().lambda, 0.0);
        let c = df_to_lambda(&x, &d, 2.0).unwrap();
        assert!(c.capped && c.lambda == 1e12);
        assert!(df_to_lambda(&x, &d, 1.5).is_err());
        assert!(df_to_lambda(&x, &d, 10.5).is_err());
    }

    proptest! {
        #[test]
        fn df_strictly_decreases(seed in any::<u64>()) {
            let x = spline_design(seed, 60);
            let curve = DfCurve::new(&x, &difference_penalty(10, 2).unwrap()).unwrap();
            let dfs: Vec<f64> = [0.01, 0.1, 1.0, 10.0].iter().map(|&l| curve.df(l)).collect();
            prop_assert!(dfs.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn equalize_examples() {
        let x10 = spline_design(2, 200);
        let d10 = difference_penalty(10, 2).unwrap();
        let single = equalize_flexibility(&[(&x10, &d10)]).unwrap();
        assert_eq!(single[0].lambda, 0.0);
        let x5 = SplineBasis::equidistant(0.0, 1.0, 5, 3, 2)
            .unwrap()
            .eval(&(0..200).map(|i| i as f64 / 199.0).collect::<Vec<_>>())
            .unwrap()
            .values;
        let d5 = difference_penalty(5, 2).unwrap();
        let both = equalize_flexibility(&[(&x5, &d5), (&x10, &d10)]).unwrap();
        assert_eq!(both[0].lambda, 0.0);
        assert!(both[1].lambda > 0.0 && (both[1].df - 5.0).abs() < 1e-6);
        let same = equalize_flexibility(&[(&x10, &d10), (&spline_design(3, 200), &d10)]).unwrap();
        assert!(same.iter().all(|c| c.lambda == 0.0));
    }

    fn linear_gaussian(n: usize, seed: u64) -> Dataset {
        let mut rng = stream_rng(seed, Stream::Dgp);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let x1: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let x2: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let y = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                1.0 + 2.0 * a - b + e
            })
            .collect();
        Dataset::new("y", y, vec!["x1".into(), "x2".into()], vec![x1, x2]).unwrap()
    }

    fn shift_spec() -> ModelSpec {
        ModelSpec::new(
            ErrorDistribution::Gaussian,
            1,
            vec![
                TermSpec::new("int", Target::Interaction, TermKind::Intercept),
                TermSpec::new("x1", Target::Shift, TermKind::linear("x1")),
                TermSpec::new("x2", Target::Shift, TermKind::linear("x2")),
            ],
        )
    }

    #[test]
    fn degenerate_and_small_inputs_are_rejected() {
        let d = Dataset::new("y", vec![2.0; 30], vec!["x1".into()], vec![(0..30).map(|i| i as f64).collect()]).unwrap();
        let spec = ModelSpec::new(
            ErrorDistribution::Gaussian,
            1,
            vec![TermSpec::new("int", Target::Interaction, TermKind::Intercept)],
        );
        assert!(matches!(fit(&spec, &d, &FitConfig::default()), Err(CoreError::DegenerateOutcome(_))));
        let small = linear_gaussian(10, 1);
        assert!(matches!(fit(&shift_spec(), &small, &FitConfig::default()), Err(CoreError::Config(_))));
        let bad = FitConfig { val_fraction: 0.6, ..FitConfig::default() };
        assert!(bad.validate().is_err());
        let bad = FitConfig { patience: 0, ..FitConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patience_one_stops_after_one_flat_epoch() {
        let data = linear_gaussian(100, 4);
        // a vanishing learning rate keeps the monitored loss constant
        let cfg = FitConfig { learning_rate: 1e-300, patience: 1, ..FitConfig::default() };
        let (_, log) = fit(&shift_spec(), &data, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.best_epoch, 1);
        assert_eq!(log.stop_reason, StopReason::EarlyStopping);
    }

    #[test]
    fn best_epoch_has_minimum_validation_loss() {
        let data = linear_gaussian(200, 5);
        let cfg = FitConfig { max_epochs: 150, learning_rate: 0.05, patience: 10, ..FitConfig::default() };
        let (model, log) = fit(&shift_spec(), &data, &cfg).unwrap();
        let min = log.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_loss, min);
        assert!(log.epochs.iter().filter_map(|e| e.val_loss).last().unwrap() >= log.best_loss);
        assert_eq!(model.jacobian_violations(), 0);
    }

    #[test]
    fn full_batch_is_deterministic() {
        let data = linear_gaussian(120, 6);
        let cfg = FitConfig { max_epochs: 40, seed: 9, ..FitConfig::default() };
        let (a, la) = fit(&shift_spec(), &data, &cfg).unwrap();
        let (b, lb) = fit(&shift_spec(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn convex_case_loss_is_monotone() {
        let data = linear_gaussian(300, 7);
        let cfg = FitConfig { max_epochs: 300, learning_rate: 0.01, val_fraction: 0.0, patience: 300, ..FitConfig::default() };
        let (_, log) = fit(&shift_spec(), &data, &cfg).unwrap();
        for w in log.epochs[4..].windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-9, "epoch {}", w[1].epoch);
        }
    }

    #[test]
    fn grad_check_passes_and_detects_corruption() {
        let data = linear_gaussian(40, 8);
        let mut spec = shift_spec();
        spec.order = 5;
        spec.terms.push(TermSpec::new("s1", Target::Both, TermKind::smooth("x1")));
        let (layout, params) = grad_check_setup(&spec, &data, 3).unwrap();
        let obj = Objective::new(&layout, layout.design(&data).unwrap(), 40).unwrap();
        let report = grad_check(&obj, &params, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
        let (_, mut grad) = obj.loss_and_grad(&params).unwrap();
        grad[1] += 0.5;
        assert!(!compare_gradients(&obj, &params, &grad, 1e-4).unwrap().pass);
    }

    #[test]
    fn stream_rngs_differ() {
        use rand::Rng;
        let a: u64 = stream_rng(1, Stream::Split).random();
        let b: u64 = stream_rng(1, Stream::Init).random();
        let c: u64 = stream_rng(1, Stream::Split).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
