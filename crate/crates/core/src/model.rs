//! Monotone coefficient heads, the transformation likelihood and prediction.
//!
//! The interaction predictor is `h1(y | x) = a(y)^T Gamma B(x)` with `Gamma`
//! of shape `(M + 1) x P` and columns strictly increasing; the shift
//! predictor is `h2(x) = C(x) psi`. The loss is the mean negative
//! log-likelihood after the change of variables `z = h1 + h2`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{difference_penalty, kron_sum_penalty, BernsteinBasis, PenaltyMatrix};
use crate::data::Dataset;
use crate::deepnet::{Activation, Gradients, Mlp, MlpTrace, NodeId, Tape};
use crate::error::{config_err, dim_err, CoreError, Result};
use crate::error_dist::ErrorDistribution;
use crate::linalg::{Matrix, PivotedQr};
use crate::math;
use crate::terms::{evaluate_block, BlockIndex, BlockState, BlockWarnings, Side, TermKind, TermSpec, ORTH_TOL};

/// Floor applied to `a'(y)^T theta(x)` inside the logarithm.
pub const JACOBIAN_FLOOR: f64 = 1e-12;

/// Iteration cap for quantile bisection.
pub const QUANTILE_MAX_ITER: usize = 60;

/// What to fit: error law, Bernstein order and predictor terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub error: ErrorDistribution,
    pub order: usize,
    pub terms: Vec<TermSpec>,
    /// Difference penalty strength along the outcome direction of `Gamma`.
    #[serde(default)]
    pub lambda_y: f64,
}

impl ModelSpec {
    pub fn new(error: ErrorDistribution, order: usize, terms: Vec<TermSpec>) -> Self {
        Self { error, order, terms, lambda_y: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(config_err(format!("bernstein_order must be at least 1, got {}", self.order)));
        }
        if !(self.lambda_y >= 0.0 && self.lambda_y.is_finite()) {
            return Err(config_err("lambda_y must be finite and >= 0"));
        }
        for (k, t) in self.terms.iter().enumerate() {
            t.validate()?;
            if self.terms[..k].iter().any(|o| o.name == t.name) {
                return Err(config_err(format!("duplicate term name `{}`", t.name)));
            }
        }
        if !self.terms.iter().any(|t| t.target.sides().contains(&Side::Interaction)) {
            return Err(config_err(
                "at least one interaction term is required; an intercept gives a distributional model with P = 1",
            ));
        }
        Ok(())
    }

    pub fn has_deep(&self) -> bool {
        self.terms.iter().any(|t| t.kind.is_deep())
    }

    pub fn has_orthogonalized(&self) -> bool {
        self.terms.iter().any(|t| matches!(t.kind, TermKind::Deep { orthogonalize: true, .. }))
    }
}

/// `Gamma[0] = raw[0]`, `Gamma[m] = Gamma[m - 1] + softplus(raw[m])`, per column.
pub fn monotone_reparam(raw: &Matrix) -> Matrix {
    let mut g = raw.clone();
    for m in 1..raw.nrows() {
        for p in 0..raw.ncols() {
            g[(m, p)] = g[(m - 1, p)] + math::softplus(raw[(m, p)]);
        }
    }
    g
}

/// Pulls `d loss / d Gamma` back to the raw parameters.
pub fn monotone_reparam_backward(raw: &Matrix, d_gamma: &Matrix) -> Matrix {
    let (rows, cols) = (raw.nrows(), raw.ncols());
    let mut out = Matrix::zeros(rows, cols);
    for p in 0..cols {
        let mut tail = 0.0;
        for m in (0..rows).rev() {
            tail += d_gamma[(m, p)];
            out[(m, p)] = if m == 0 { tail } else { math::sigmoid(raw[(m, p)]) * tail };
        }
    }
    out
}

/// Raw parameters whose reparameterization is `gamma`; columns must be strictly increasing.
pub fn monotone_reparam_inverse(gamma: &Matrix) -> Result<Matrix> {
    let mut raw = gamma.clone();
    for m in 1..gamma.nrows() {
        for p in 0..gamma.ncols() {
            let step = gamma[(m, p)] - gamma[(m - 1, p)];
            if !(step > 0.0) {
                return Err(config_err(format!("column {p} of Gamma is not strictly increasing at row {m}")));
            }
            raw[(m, p)] = math::softplus_inv(step);
        }
    }
    Ok(raw)
}

/// `h1_i = a(y_i)^T Gamma B_i`, computed as `(A Gamma)` row-dotted with `B`.
pub fn interaction_predict(a: &Matrix, b: &Matrix, gamma: &Matrix) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() || a.ncols() != gamma.nrows() || b.ncols() != gamma.ncols() {
        return Err(dim_err(format!(
            "A {}x{}, B {}x{}, Gamma {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    let ag = a.matmul(gamma)?;
    Ok((0..a.nrows()).map(|i| crate::linalg::dot(ag.row(i), b.row(i))).collect())
}

/// Same quantity through the explicit row-wise tensor product `(A (.) B) vec(Gamma^T)`.
pub fn interaction_predict_khatri_rao(a: &Matrix, b: &Matrix, gamma: &Matrix) -> Result<Vec<f64>> {
    if a.ncols() != gamma.nrows() || b.ncols() != gamma.ncols() {
        return Err(dim_err("Gamma does not match the basis widths"));
    }
    let rows = crate::basis::tensor_basis(a, b)?;
    // row-major storage of Gamma is exactly vec(Gamma^T)
    rows.matvec(gamma.as_slice())
}

/// Mean negative log-likelihood for given conditional parameters.
///
/// Row `i` of `theta` is `theta(x_i) = Gamma B_i`. Rows whose Jacobian term
/// `a'(y_i)^T theta(x_i)` is not positive are reported in the error.
pub fn nll(error: ErrorDistribution, basis: &BernsteinBasis, y: &[f64], theta: &Matrix, beta: &[f64]) -> Result<f64> {
    if theta.nrows() != y.len() || beta.len() != y.len() || theta.ncols() != basis.dim() {
        return Err(dim_err("y, theta and beta must agree in rows and basis width"));
    }
    if y.is_empty() {
        return Err(dim_err("nll needs at least one row"));
    }
    let a = basis.eval(y)?.values;
    let ap = basis.deriv(y)?.values;
    let mut bad = Vec::new();
    let mut total = 0.0;
    for i in 0..y.len() {
        let h1 = crate::linalg::dot(a.row(i), theta.row(i));
        let jac = crate::linalg::dot(ap.row(i), theta.row(i));
        if !(jac > 0.0) {
            bad.push(i);
            continue;
        }
        total += -error.log_pdf(h1 + beta[i])? - math::ln(jac);
    }
    if !bad.is_empty() {
        return Err(CoreError::Jacobian { rows: bad });
    }
    Ok(total / y.len() as f64)
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Unconstrained `(M + 1) x P` matrix mapped to `Gamma` by [`monotone_reparam`].
    pub gamma_raw: Matrix,
    pub psi: Vec<f64>,
    /// One network per deep block, interaction blocks first.
    pub nets: Vec<Mlp>,
}

impl Params {
    pub fn gamma(&self) -> Matrix {
        monotone_reparam(&self.gamma_raw)
    }

    pub fn len(&self) -> usize {
        self.gamma_raw.as_slice().len() + self.psi.len() + self.nets.iter().map(Mlp::num_params).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `gamma_raw` row-major, then `psi`, then each network.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(self.gamma_raw.as_slice());
        out.extend_from_slice(&self.psi);
        for net in &self.nets {
            net.flatten_into(&mut out);
        }
        out
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(dim_err(format!("{} values for {} parameters", values.len(), self.len())));
        }
        let ng = self.gamma_raw.as_slice().len();
        self.gamma_raw.as_mut_slice().copy_from_slice(&values[..ng]);
        let nq = self.psi.len();
        self.psi.copy_from_slice(&values[ng..ng + nq]);
        let mut off = ng + nq;
        for net in &mut self.nets {
            off += net.assign_from(&values[off..]);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Range of a feature on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Everything about a model except its trainable parameters: outcome basis,
/// fitted block states and penalty settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub basis: BernsteinBasis,
    pub error: ErrorDistribution,
    pub lambda_y: f64,
    pub interaction: Vec<BlockState>,
    pub shift: Vec<BlockState>,
    pub feature_ranges: Vec<FeatureRange>,
}

impl Layout {
    /// Evaluates all blocks in training mode on `data` and records their state.
    ///
    /// Smoothing parameters are taken from the term specs (zero when unset);
    /// calibration from degrees of freedom happens in [`crate::train`].
    pub fn from_training_data(spec: &ModelSpec, basis: BernsteinBasis, data: &Dataset) -> Result<(Self, BlockWarnings)> {
        spec.validate()?;
        if basis.order() != spec.order {
            return Err(config_err("basis order differs from the model spec"));
        }
        let mut warnings = BlockWarnings::default();
        let mut interaction = Vec::new();
        let mut shift = Vec::new();
        let mut feature_ranges: Vec<FeatureRange> = Vec::new();
        for term in &spec.terms {
            for f in term.kind.features() {
                if !feature_ranges.iter().any(|r| r.name == f) {
                    let x = data.feature(f)?;
                    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    feature_ranges.push(FeatureRange { name: f.to_string(), min, max });
                }
            }
            for &side in term.target.sides() {
                let (block, mut state) = evaluate_block(term, side, data, None)?;
                warnings.merge(block.warnings);
                state.lambda = term.kind.lambda().unwrap_or(0.0);
                match side {
                    Side::Interaction => interaction.push(state),
                    Side::Shift => shift.push(state),
                }
            }
        }
        Ok((Self { basis, error: spec.error, lambda_y: spec.lambda_y, interaction, shift, feature_ranges }, warnings))
    }

    /// Number of interaction columns `P`.
    pub fn p(&self) -> usize {
        self.interaction.iter().map(BlockState::width).sum()
    }

    /// Number of shift columns `Q`.
    pub fn q(&self) -> usize {
        self.shift.iter().map(BlockState::width).sum()
    }

    pub fn interaction_index(&self) -> BlockIndex {
        BlockIndex::from_widths(self.interaction.iter().map(|s| (s.name.as_str(), s.width())))
            .expect("block names are unique per side")
    }

    pub fn shift_index(&self) -> BlockIndex {
        BlockIndex::from_widths(self.shift.iter().map(|s| (s.name.as_str(), s.width())))
            .expect("block names are unique per side")
    }

    fn deep_blocks(&self) -> impl Iterator<Item = &BlockState> {
        self.interaction.iter().chain(&self.shift).filter(|s| s.is_deep())
    }

    pub fn num_nets(&self) -> usize {
        self.deep_blocks().count()
    }

    pub fn has_orthogonalized(&self) -> bool {
        self.shift.iter().any(|s| matches!(s.kind, TermKind::Deep { orthogonalize: true, .. }))
    }

    /// He-initialized networks for every deep block.
    pub fn new_nets<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Mlp>> {
        self.deep_blocks()
            .map(|s| match &s.kind {
                TermKind::Deep { features, layers, .. } => Mlp::new(features.len(), layers, Activation::Relu, rng),
                _ => unreachable!(),
            })
            .collect()
    }

    /// Replays every block on `data`. The outcome basis is evaluated when
    /// the data carry an outcome column.
    pub fn design(&self, data: &Dataset) -> Result<Design> {
        let mut warnings = BlockWarnings::default();
        let mut net = 0;
        let mut build = |states: &[BlockState]| -> Result<Vec<Cols>> {
            states
                .iter()
                .map(|s| {
                    let spec = TermSpec::new(s.name.clone(), side_target(s.side), s.kind.clone());
                    let (block, _) = evaluate_block(&spec, s.side, data, Some(s))?;
                    warnings.merge(block.warnings);
                    Ok(if s.is_deep() {
                        net += 1;
                        Cols::Deep { net: net - 1, input: block.columns }
                    } else {
                        Cols::Fixed(block.columns)
                    })
                })
                .collect()
        };
        let inter = build(&self.interaction)?;
        let shift = build(&self.shift)?;
        let (a, ap, outcome_clamped) = match data.outcome() {
            Some(y) => {
                let e = self.basis.eval(y)?;
                (Some(e.values), Some(self.basis.deriv(y)?.values), e.clamped)
            }
            None => (None, None, 0),
        };
        Ok(Design { n: data.n(), a, ap, inter, shift, warnings, outcome_clamped })
    }

    /// Per-block penalty matrices scaled by their smoothing parameters.
    pub fn penalties(&self) -> Result<Penalties> {
        let scaled = |states: &[BlockState], dim: usize| -> Matrix {
            let mut d = Matrix::zeros(dim, dim);
            let mut off = 0;
            for s in states {
                if let (Some(pen), true) = (&s.penalty, s.lambda > 0.0) {
                    let e = pen.entries();
                    for i in 0..e.nrows() {
                        for j in 0..e.ncols() {
                            d[(off + i, off + j)] = s.lambda * e[(i, j)];
                        }
                    }
                }
                off += s.width();
            }
            d
        };
        let m1 = self.basis.dim();
        let y_dir = if self.lambda_y > 0.0 {
            Some(difference_penalty(m1, 2.min(self.basis.order()))?.entries().scale(self.lambda_y))
        } else {
            None
        };
        Ok(Penalties { y_dir, inter: scaled(&self.interaction, self.p()), shift: scaled(&self.shift, self.q()) })
    }

    /// The full interaction penalty acting on `vec(Gamma^T)`.
    pub fn interaction_penalty(&self) -> Result<PenaltyMatrix> {
        let pens = self.penalties()?;
        let m1 = self.basis.dim();
        let da = match &pens.y_dir {
            Some(d) => PenaltyMatrix::new(d.clone(), 0)?,
            None => PenaltyMatrix::new(Matrix::zeros(m1, m1), m1)?,
        };
        let db = PenaltyMatrix::new(pens.inter.clone(), 0)?;
        kron_sum_penalty(&da, 1.0, &db, 1.0)
    }

    /// Starting values: every column of `Gamma` rises linearly so that
    /// `h1` spans roughly `[-2, 2]` over the outcome interval; `psi = 0`.
    pub fn init_params<R: Rng + ?Sized>(&self, design: &Design, rng: &mut R) -> Result<Params> {
        let nets = self.new_nets(rng)?;
        let m = self.basis.order();
        let probe = Params { gamma_raw: Matrix::zeros(m + 1, self.p()), psi: vec![0.0; self.q()], nets };
        let b = interaction_columns(design, &probe, None)?;
        let rows = b.nrows().max(1) as f64;
        let s = b.as_slice().iter().sum::<f64>() / rows;
        let s = if s > 1e-8 && s.is_finite() { s } else { 1.0 };
        let gamma = Matrix::from_fn(m + 1, self.p(), |r, _| (-2.0 + 4.0 * r as f64 / m as f64) / s);
        Ok(Params { gamma_raw: monotone_reparam_inverse(&gamma)?, ..probe })
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.gamma_raw.nrows() != self.basis.dim() || params.gamma_raw.ncols() != self.p() {
            return Err(dim_err(format!(
                "Gamma is {}x{}, the layout needs {}x{}",
                params.gamma_raw.nrows(),
                params.gamma_raw.ncols(),
                self.basis.dim(),
                self.p()
            )));
        }
        if params.psi.len() != self.q() || params.nets.len() != self.num_nets() {
            return Err(dim_err("psi or network count does not match the layout"));
        }
        Ok(())
    }
}

fn side_target(side: Side) -> crate::terms::Target {
    match side {
        Side::Interaction => crate::terms::Target::Interaction,
        Side::Shift => crate::terms::Target::Shift,
    }
}

/// Penalty matrices with smoothing parameters applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    /// `lambda_y Da` along the Bernstein coefficients, if any.
    pub y_dir: Option<Matrix>,
    /// Block-diagonal `P x P` feature-direction penalty.
    pub inter: Matrix,
    /// Block-diagonal `Q x Q` penalty on `psi`.
    pub shift: Matrix,
}

impl Penalties {
    /// `vec(Gamma^T)^T D vec(Gamma^T) + psi^T D psi`.
    pub fn value(&self, gamma: &Matrix, psi: &[f64]) -> f64 {
        let mut v = self.shift.quad_form(psi);
        for m in 0..gamma.nrows() {
            v += self.inter.quad_form(gamma.row(m));
        }
        if let Some(da) = &self.y_dir {
            for p in 0..gamma.ncols() {
                v += da.quad_form(&gamma.col(p));
            }
        }
        v
    }

    /// Gradients of [`Penalties::value`] with respect to `Gamma` and `psi`.
    pub fn gradient(&self, gamma: &Matrix, psi: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        let mut dg = gamma.matmul(&self.inter)?.scale(2.0);
        if let Some(da) = &self.y_dir {
            dg = dg.add(&da.matmul(gamma)?.scale(2.0))?;
        }
        let dp = self.shift.matvec(psi)?.into_iter().map(|v| 2.0 * v).collect();
        Ok((dg, dp))
    }

    pub fn is_zero(&self) -> bool {
        self.y_dir.is_none() && self.inter.max_abs() == 0.0 && self.shift.max_abs() == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Cols {
    Fixed(Matrix),
    Deep { net: usize, input: Matrix },
}

impl Cols {
    fn select_rows(&self, idx: &[usize]) -> Self {
        match self {
            Cols::Fixed(m) => Cols::Fixed(m.select_rows(idx)),
            Cols::Deep { net, input } => Cols::Deep { net: *net, input: input.select_rows(idx) },
        }
    }
}

/// Design of a set of rows: outcome basis, structured columns and deep inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    a: Option<Matrix>,
    ap: Option<Matrix>,
    inter: Vec<Cols>,
    shift: Vec<Cols>,
    pub warnings: BlockWarnings,
    /// Outcome values clamped into the basis interval.
    pub outcome_clamped: usize,
}

impl Design {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            n: idx.len(),
            a: self.a.as_ref().map(|m| m.select_rows(idx)),
            ap: self.ap.as_ref().map(|m| m.select_rows(idx)),
            inter: self.inter.iter().map(|c| c.select_rows(idx)).collect(),
            shift: self.shift.iter().map(|c| c.select_rows(idx)).collect(),
            warnings: self.warnings,
            outcome_clamped: 0,
        }
    }

    /// `[1, structured shift columns]`: the span deep shift outputs are made orthogonal to.
    pub fn shift_structure(&self) -> Result<Matrix> {
        let ones = Matrix::filled(self.n, 1, 1.0);
        let mut parts = vec![&ones];
        for c in &self.shift {
            if let Cols::Fixed(m) = c {
                parts.push(m);
            }
        }
        Matrix::hcat(&parts)
    }

    fn outcome_basis(&self) -> Result<(&Matrix, &Matrix)> {
        match (&self.a, &self.ap) {
            (Some(a), Some(ap)) => Ok((a, ap)),
            _ => Err(config_err("the data carry no outcome column")),
        }
    }
}

/// How orthogonalized deep shift outputs are formed.
#[derive(Debug, Clone, Copy)]
pub enum Orth<'a> {
    /// Project onto the complement of the design span of these rows (training).
    Project(&'a PivotedQr),
    /// Subtract `X W` with weights stored per shift block (prediction).
    Weights(&'a [Option<Matrix>]),
}

fn interaction_columns(design: &Design, params: &Params, mut tape: Option<&mut TapeState>) -> Result<Matrix> {
    let mut parts = Vec::with_capacity(design.inter.len());
    for c in &design.inter {
        parts.push(match c {
            Cols::Fixed(m) => m.clone(),
            Cols::Deep { net, input } => match tape.as_deref_mut() {
                Some(ts) => {
                    let trace = params.nets[*net].forward(input, &mut ts.tape)?;
                    let sp = ts.tape.softplus(trace.output);
                    ts.record(*net, trace, sp, None);
                    ts.tape.value(sp).clone()
                }
                None => params.nets[*net].predict(input)?.map(math::softplus),
            },
        });
    }
    if parts.is_empty() {
        return Ok(Matrix::zeros(design.n, 0));
    }
    Matrix::hcat(&parts.iter().collect::<Vec<_>>())
}

fn shift_columns(
    design: &Design,
    params: &Params,
    layout: &Layout,
    orth: Option<Orth<'_>>,
    mut tape: Option<&mut TapeState>,
) -> Result<Matrix> {
    let structure = if layout.has_orthogonalized() { Some(design.shift_structure()?) } else { None };
    let mut parts = Vec::with_capacity(design.shift.len());
    for (k, (c, state)) in design.shift.iter().zip(&layout.shift).enumerate() {
        parts.push(match c {
            Cols::Fixed(m) => m.clone(),
            Cols::Deep { net, input } => {
                let orthogonal = matches!(state.kind, TermKind::Deep { orthogonalize: true, .. });
                let (raw, trace) = match tape.as_deref_mut() {
                    Some(ts) => {
                        let trace = params.nets[*net].forward(input, &mut ts.tape)?;
                        (ts.tape.value(trace.output).clone(), Some(trace))
                    }
                    None => (params.nets[*net].predict(input)?, None),
                };
                let out = if orthogonal {
                    match orth {
                        Some(Orth::Project(qr)) => qr.project_out(&raw)?,
                        Some(Orth::Weights(w)) => {
                            let w = w.get(k).and_then(Option::as_ref).ok_or_else(|| {
                                CoreError::MissingState(format!("{} orthogonalization weights", state.name))
                            })?;
                            let x = structure.as_ref().expect("structure built for orthogonalized blocks");
                            raw.sub(&x.matmul(w)?)?
                        }
                        None => return Err(CoreError::MissingState(format!("{} orthogonalization", state.name))),
                    }
                } else {
                    raw
                };
                if let (Some(ts), Some(trace)) = (tape.as_deref_mut(), trace) {
                    let node = trace.output;
                    let projector = match (orthogonal, orth) {
                        (true, Some(Orth::Project(qr))) => Some(qr.clone()),
                        _ => None,
                    };
                    ts.record(*net, trace, node, projector);
                }
                out
            }
        });
    }
    if parts.is_empty() {
        return Ok(Matrix::zeros(design.n, 0));
    }
    Matrix::hcat(&parts.iter().collect::<Vec<_>>())
}

struct DeepRecord {
    net: usize,
    trace: MlpTrace,
    /// Node whose value forms the block's design columns (before projection).
    node: NodeId,
    projector: Option<PivotedQr>,
}

#[derive(Default)]
struct TapeState {
    tape: Tape,
    records: Vec<DeepRecord>,
}

impl TapeState {
    fn record(&mut self, net: usize, trace: MlpTrace, node: NodeId, projector: Option<PivotedQr>) {
        self.records.push(DeepRecord { net, trace, node, projector });
    }
}

/// Loss value split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// Mean negative log-likelihood with the Jacobian floor applied.
    pub nll: f64,
    /// Penalty divided by the penalty row count.
    pub penalty: f64,
    pub total: f64,
    /// Rows whose Jacobian term fell to the floor.
    pub violations: Vec<usize>,
}

/// Penalized loss over a fixed set of rows.
pub struct Objective<'a> {
    layout: &'a Layout,
    design: Design,
    penalties: Penalties,
    penalty_rows: f64,
    qr: Option<PivotedQr>,
    weights: Option<Vec<Option<Matrix>>>,
}

impl<'a> Objective<'a> {
    /// `penalty_rows` divides the penalty; use the training row count so a
    /// minibatch loss is an unbiased piece of the full loss.
    pub fn new(layout: &'a Layout, design: Design, penalty_rows: usize) -> Result<Self> {
        design.outcome_basis()?;
        if design.n == 0 {
            return Err(dim_err("objective over zero rows"));
        }
        let qr = if layout.has_orthogonalized() {
            Some(PivotedQr::new(&design.shift_structure()?, ORTH_TOL))
        } else {
            None
        };
        Ok(Self {
            layout,
            design,
            penalties: layout.penalties()?,
            penalty_rows: penalty_rows.max(1) as f64,
            qr,
            weights: None,
        })
    }

    /// Evaluates orthogonalized deep outputs with weights fitted on other
    /// rows instead of projecting within these rows. Gradients then treat
    /// the weights as constants, so use this for monitoring only.
    pub fn set_orth_weights(&mut self, weights: Vec<Option<Matrix>>) {
        self.weights = Some(weights);
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn loss(&self, params: &Params) -> Result<LossValue> {
        Ok(self.evaluate(params, false)?.0)
    }

    /// Loss and its gradient in [`Params::flatten`] order.
    pub fn loss_and_grad(&self, params: &Params) -> Result<(LossValue, Vec<f64>)> {
        let (lv, g) = self.evaluate(params, true)?;
        Ok((lv, g.expect("gradient requested")))
    }

    /// Least-squares weights `W` per orthogonalized shift block, from these rows.
    pub fn orth_weights(&self, params: &Params) -> Result<Vec<Option<Matrix>>> {
        let Some(qr) = &self.qr else {
            return Ok(vec![None; self.layout.shift.len()]);
        };
        let width = self.design.shift_structure()?.ncols();
        self.design
            .shift
            .iter()
            .zip(&self.layout.shift)
            .map(|(c, s)| match (c, &s.kind) {
                (Cols::Deep { net, input }, TermKind::Deep { orthogonalize: true, .. }) => {
                    let u = params.nets[*net].predict(input)?;
                    let w_kept = qr.solve(&u)?;
                    let mut w = Matrix::zeros(width, u.ncols());
                    for (k, &j) in qr.kept.iter().enumerate() {
                        w.row_mut(j).copy_from_slice(w_kept.row(k));
                    }
                    Ok(Some(w))
                }
                _ => Ok(None),
            })
            .collect()
    }

    fn evaluate(&self, params: &Params, want_grad: bool) -> Result<(LossValue, Option<Vec<f64>>)> {
        self.layout.check_params(params)?;
        let (a, ap) = self.design.outcome_basis()?;
        let n = self.design.n;
        let mut ts = if want_grad && !params.nets.is_empty() { Some(TapeState::default()) } else { None };
        let b = interaction_columns(&self.design, params, ts.as_mut())?;
        let orth = match &self.weights {
            Some(w) => Some(Orth::Weights(w)),
            None => self.qr.as_ref().map(Orth::Project),
        };
        let c = shift_columns(&self.design, params, self.layout, orth, ts.as_mut())?;

        let gamma = monotone_reparam(&params.gamma_raw);
        let ag = a.matmul(&gamma)?;
        let apg = ap.matmul(&gamma)?;
        let beta = c.matvec(&params.psi)?;
        let error = self.layout.error;
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut violations = Vec::new();
        let mut g = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let h1 = crate::linalg::dot(ag.row(i), b.row(i));
            let jac = crate::linalg::dot(apg.row(i), b.row(i));
            let z = h1 + beta[i];
            let floored = !(jac > JACOBIAN_FLOOR);
            if floored {
                violations.push(i);
            }
            total += -error.log_pdf_unchecked(z) - math::ln(if floored { JACOBIAN_FLOOR } else { jac });
            g[i] = -error.score(z) * inv_n;
            r[i] = if floored { 0.0 } else { -inv_n / jac };
        }
        let nll = total * inv_n;
        let penalty = if self.penalties.is_zero() { 0.0 } else { self.penalties.value(&gamma, &params.psi) / self.penalty_rows };
        let lv = LossValue { nll, penalty, total: nll + penalty, violations };
        if !want_grad {
            return Ok((lv, None));
        }

        // W = diag(g) A + diag(r) A'
        let w = Matrix::from_fn(n, a.ncols(), |i, m| g[i] * a[(i, m)] + r[i] * ap[(i, m)]);
        let mut d_gamma = w.t_matmul(&b)?;
        let mut d_psi = c.t_matmul(&Matrix::column(&g))?.into_vec();
        if !self.penalties.is_zero() {
            let (pg, pp) = self.penalties.gradient(&gamma, &params.psi)?;
            d_gamma = d_gamma.add(&pg.scale(1.0 / self.penalty_rows))?;
            for (d, p) in d_psi.iter_mut().zip(pp) {
                *d += p / self.penalty_rows;
            }
        }
        let d_raw = monotone_reparam_backward(&params.gamma_raw, &d_gamma);
        let mut grad = Vec::with_capacity(params.len());
        grad.extend_from_slice(d_raw.as_slice());
        grad.extend_from_slice(&d_psi);

        if let Some(mut ts) = ts {
            let d_b = w.matmul(&gamma)?;
            let inter_idx = self.layout.interaction_index();
            let shift_idx = self.layout.shift_index();
            let mut seeds = Vec::new();
            for rec in &ts.records {
                let (side, block) = self.block_of_net(rec.net);
                let mut upstream = match side {
                    Side::Interaction => d_b.select_cols(range_of(&inter_idx, block)),
                    Side::Shift => {
                        let cols = range_of(&shift_idx, block);
                        Matrix::from_fn(n, cols.len(), |i, k| g[i] * params.psi[cols.start + k])
                    }
                };
                if let Some(qr) = &rec.projector {
                    upstream = qr.project_out(&upstream)?;
                }
                seeds.push((rec.node, upstream));
            }
            let mut root = None;
            for (node, upstream) in seeds {
                let leaf = ts.tape.leaf(upstream);
                let prod = ts.tape.mul(node, leaf)?;
                let s = ts.tape.sum(prod);
                root = Some(match root {
                    None => s,
                    Some(acc) => ts.tape.add(acc, s)?,
                });
            }
            let grads: Option<Gradients> = match root {
                Some(root) => Some(ts.tape.backward(root)?),
                None => None,
            };
            let mut per_net: Vec<Vec<f64>> = params.nets.iter().map(|n| vec![0.0; n.num_params()]).collect();
            if let Some(grads) = grads {
                for rec in &ts.records {
                    let mut v = Vec::new();
                    params.nets[rec.net].gradient_into(&rec.trace, &grads, &mut v);
                    per_net[rec.net] = v;
                }
            }
            for v in per_net {
                grad.extend(v);
            }
        } else {
            for net in &params.nets {
                grad.extend(core::iter::repeat_n(0.0, net.num_params()));
            }
        }
        Ok((lv, Some(grad)))
    }

    fn block_of_net(&self, net: usize) -> (Side, &str) {
        let mut k = 0;
        for s in &self.layout.interaction {
            if s.is_deep() {
                if k == net {
                    return (Side::Interaction, &s.name);
                }
                k += 1;
            }
        }
        for s in &self.layout.shift {
            if s.is_deep() {
                if k == net {
                    return (Side::Shift, &s.name);
                }
                k += 1;
            }
        }
        unreachable!("network index within layout")
    }
}

fn range_of(index: &BlockIndex, name: &str) -> Range<usize> {
    index.range(name).expect("block present in index")
}

/// A fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DctmModel {
    spec: ModelSpec,
    layout: Layout,
    params: Params,
    /// Per shift block; `Some` for orthogonalized deep blocks.
    orth_weights: Vec<Option<Matrix>>,
    /// Jacobian-floor hits on the training rows with the final parameters.
    jacobian_violations: usize,
}

impl DctmModel {
    pub fn from_parts(
        spec: ModelSpec,
        layout: Layout,
        params: Params,
        orth_weights: Vec<Option<Matrix>>,
        jacobian_violations: usize,
    ) -> Result<Self> {
        spec.validate()?;
        layout.check_params(&params)?;
        if orth_weights.len() != layout.shift.len() {
            return Err(dim_err("one orthogonalization slot per shift block is required"));
        }
        Ok(Self { spec, layout, params, orth_weights, jacobian_violations })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn basis(&self) -> &BernsteinBasis {
        &self.layout.basis
    }

    pub fn error(&self) -> ErrorDistribution {
        self.layout.error
    }

    pub fn gamma(&self) -> Matrix {
        self.params.gamma()
    }

    pub fn jacobian_violations(&self) -> usize {
        self.jacobian_violations
    }

    /// Shift coefficients of a named shift block.
    pub fn shift_coefficients(&self, term: &str) -> Option<&[f64]> {
        self.layout.shift_index().range(term).map(|r| &self.params.psi[r])
    }

    /// Features the model reads.
    pub fn feature_names(&self) -> Vec<&str> {
        self.layout.feature_ranges.iter().map(|r| r.name.as_str()).collect()
    }

    /// Conditional distributions for every row of `data` (the outcome column is ignored).
    pub fn conditional(&self, data: &Dataset) -> Result<Conditional> {
        let design = self.layout.design(data)?;
        let b = interaction_columns(&design, &self.params, None)?;
        let c = shift_columns(&design, &self.params, &self.layout, Some(Orth::Weights(&self.orth_weights)), None)?;
        let theta = b.matmul(&self.gamma().transpose())?;
        let beta = c.matvec(&self.params.psi)?;
        Ok(Conditional { basis: self.layout.basis, error: self.layout.error, theta, beta, warnings: design.warnings })
    }

    /// Mean negative log-likelihood on rows with an outcome; Jacobian violations are errors.
    pub fn nll(&self, data: &Dataset) -> Result<f64> {
        let y = data.outcome().ok_or_else(|| config_err("the data carry no outcome column"))?;
        let cond = self.conditional(data)?;
        nll(self.layout.error, &self.layout.basis, y, &cond.theta, &cond.beta)
    }

    /// Contribution of one structured term over a grid of `k` points per
    /// feature spanning its training range.
    ///
    /// Shift terms give `(features..., effect)`. Interaction terms give the
    /// surface `a(y)^T Gamma_j b_j(x)` over an additional outcome grid, as
    /// `(y, features..., effect)` rows.
    pub fn partial_effect(&self, term: &str, side: Option<Side>, k: usize) -> Result<PartialEffect> {
        if k < 2 {
            return Err(config_err("partial effects need a grid of at least 2 points"));
        }
        let side = match side {
            Some(s) => s,
            None if self.layout.interaction.iter().any(|s| s.name == term) => Side::Interaction,
            None => Side::Shift,
        };
        let states = match side {
            Side::Interaction => &self.layout.interaction,
            Side::Shift => &self.layout.shift,
        };
        let state = states
            .iter()
            .find(|s| s.name == term)
            .ok_or_else(|| config_err(format!("no {side:?} term named `{term}`").to_lowercase()))?;
        if state.is_deep() {
            return Err(config_err(format!(
                "term `{term}` is a neural network; partial effects are defined for structured terms only"
            )));
        }
        let features: Vec<&str> = state.kind.features();
        let grids: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                let r = self.layout.feature_ranges.iter().find(|r| r.name == *f).expect("range recorded");
                linspace(r.min, r.max, k)
            })
            .collect();
        // Cartesian product of the feature grids
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for g in &grids {
            points = points.iter().flat_map(|p| g.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
        }
        let n = points.len();
        let columns = (0..features.len()).map(|j| points.iter().map(|p| p[j]).collect()).collect();
        let grid_data = Dataset::features(n, features.iter().map(|f| f.to_string()).collect(), columns)?;
        let spec = TermSpec::new(state.name.clone(), side_target(side), state.kind.clone());
        let (block, _) = evaluate_block(&spec, side, &grid_data, Some(state))?;
        let mut names: Vec<String> = features.iter().map(|f| f.to_string()).collect();
        let mut rows = Vec::new();
        match side {
            Side::Shift => {
                let range = range_of(&self.layout.shift_index(), term);
                let effect = block.columns.matvec(&self.params.psi[range])?;
                for (p, e) in points.iter().zip(effect) {
                    rows.push([p.clone(), vec![e]].concat());
                }
            }
            Side::Interaction => {
                let range = range_of(&self.layout.interaction_index(), term);
                let gamma = self.gamma().select_cols(range);
                let basis = self.layout.basis;
                let ys = linspace(basis.lower(), basis.upper(), k);
                let a = basis.eval(&ys)?.values;
                let surface = a.matmul(&gamma)?.matmul(&block.columns.transpose())?;
                for (yi, &y) in ys.iter().enumerate() {
                    for (pi, p) in points.iter().enumerate() {
                        rows.push([vec![y], p.clone(), vec![surface[(yi, pi)]]].concat());
                    }
                }
                names.insert(0, "y".to_string());
            }
        }
        names.push("effect".to_string());
        Ok(PartialEffect { columns: names, rows })
    }
}

/// Long-format table of a term's partial effect.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialEffect {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// `k` equidistant points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..k).map(|i| if i + 1 == k { hi } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 }).collect(),
    }
}

/// Result of inverting the conditional CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub value: f64,
    /// The requested probability lies outside `[F(l | x), F(u | x)]`; the value is the nearest bound.
    pub boundary: bool,
    pub iterations: usize,
}

/// Conditional distributions `F_{Y|x}` for a set of feature rows.
///
/// Row `i` stores `theta(x_i) = Gamma B(x_i)` and `beta(x_i)`, so evaluating
/// at any `y` costs one Bernstein row.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    basis: BernsteinBasis,
    error: ErrorDistribution,
    theta: Matrix,
    beta: Vec<f64>,
    pub warnings: BlockWarnings,
}

impl Conditional {
    pub fn from_parts(basis: BernsteinBasis, error: ErrorDistribution, theta: Matrix, beta: Vec<f64>) -> Result<Self> {
        if theta.ncols() != basis.dim() || theta.nrows() != beta.len() {
            return Err(dim_err("theta and beta do not match"));
        }
        Ok(Self { basis, error, theta, beta, warnings: BlockWarnings::default() })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn basis(&self) -> &BernsteinBasis {
        &self.basis
    }

    pub fn theta(&self, row: usize) -> &[f64] {
        self.theta.row(row)
    }

    pub fn beta(&self, row: usize) -> f64 {
        self.beta[row]
    }

    /// `h1(y | x_row)`; `y` is clamped into the basis interval.
    pub fn h1(&self, row: usize, y: f64) -> f64 {
        let mut a = vec![0.0; self.basis.dim()];
        self.basis.eval_into(y, &mut a);
        crate::linalg::dot(&a, self.theta.row(row))
    }

    /// `d h1(y | x_row) / dy`.
    pub fn h1_deriv(&self, row: usize, y: f64) -> f64 {
        let mut a = vec![0.0; self.basis.dim()];
        self.basis.deriv_into(y, &mut a);
        crate::linalg::dot(&a, self.theta.row(row))
    }

    pub fn h(&self, row: usize, y: f64) -> f64 {
        self.h1(row, y) + self.beta[row]
    }

    pub fn cdf(&self, row: usize, y: f64) -> f64 {
        self.error.cdf_unchecked(self.h(row, y))
    }

    /// `f_Z(h(y | x)) * dh/dy`, zero where the derivative is not positive.
    pub fn density(&self, row: usize, y: f64) -> f64 {
        math::exp(self.log_density(row, y))
    }

    pub fn log_density(&self, row: usize, y: f64) -> f64 {
        let d = self.h1_deriv(row, y);
        if d > 0.0 {
            self.error.log_pdf_unchecked(self.h(row, y)) + math::ln(d)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Solves `h1(y | x) = F_Z^{-1}(p) - beta(x)` by bisection on `[l, u]`.
    pub fn quantile(&self, row: usize, p: f64) -> Result<Quantile> {
        let target = self.error.quantile(p)? - self.beta[row];
        let (mut lo, mut hi) = (self.basis.lower(), self.basis.upper());
        if target <= self.h1(row, lo) {
            return Ok(Quantile { value: lo, boundary: true, iterations: 0 });
        }
        if target >= self.h1(row, hi) {
            return Ok(Quantile { value: hi, boundary: true, iterations: 0 });
        }
        let tol = 1e-12 * (hi - lo);
        let mut iterations = 0;
        while hi - lo > tol && iterations < QUANTILE_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if self.h1(row, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            iterations += 1;
        }
        Ok(Quantile { value: 0.5 * (lo + hi), boundary: false, iterations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terms::Target;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn unit_basis(order: usize) -> BernsteinBasis {
        BernsteinBasis::new(order, 0.0, 1.0).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let raw = Matrix::from_rows(&[vec![0.5], vec![-1.0], vec![2.0]]).unwrap();
        let g = monotone_reparam(&raw);
        assert_eq!(g[(0, 0)], 0.5);
        assert!((g[(1, 0)] - 0.813_261_687_518_223).abs() < 1e-12);
        assert!((g[(2, 0)] - 2.940_189_698_561_195_7).abs() < 1e-12);
        assert!((g[(2, 0)] - 2.940_20).abs() < 1e-4);
        let g = monotone_reparam(&Matrix::zeros(2, 1));
        assert!((g[(1, 0)] - core::f64::consts::LN_2).abs() < 1e-15);
        let back = monotone_reparam_inverse(&monotone_reparam(&raw)).unwrap();
        assert!(back.sub(&raw).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn reparam_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Matrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
        let weights = Matrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
        let f = |r: &Matrix| {
            monotone_reparam(r).as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic = monotone_reparam_backward(&raw, &weights);
        for k in 0..18 {
            let mut plus = raw.clone();
            plus.as_mut_slice()[k] += 1e-6;
            let mut minus = raw.clone();
            minus.as_mut_slice()[k] -= 1e-6;
            let fd = (f(&plus) - f(&minus)) / 2e-6;
            assert!((fd - analytic.as_slice()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn interaction_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(interaction_predict(&a, &b, &g).unwrap(), vec![61.0]);
        assert_eq!(interaction_predict_khatri_rao(&a, &b, &g).unwrap(), vec![61.0]);
        let e1 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(interaction_predict(&a, &e1, &g).unwrap(), vec![1.0 * 2.0 + 2.0 * 4.0]);
        assert_eq!(interaction_predict(&a, &b, &Matrix::zeros(2, 2)).unwrap(), vec![0.0]);
        assert!(interaction_predict(&a, &b, &Matrix::zeros(3, 2)).is_err());
    }

    proptest! {
        #[test]
        fn factored_and_khatri_rao_agree(m in 1usize..=25, p in 1usize..=20, n in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_basis(m).eval(&(0..n).map(|_| Uniform::new(0.0, 1.0).unwrap().sample(&mut rng)).collect::<Vec<_>>()).unwrap().values;
            let b = Matrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
            let g = Matrix::from_fn(m + 1, p, |_, _| StandardNormal.sample(&mut rng));
            let f = interaction_predict(&a, &b, &g).unwrap();
            let k = interaction_predict_khatri_rao(&a, &b, &g).unwrap();
            for (x, y) in f.iter().zip(&k) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn reparam_columns_strictly_increase(vals in proptest::collection::vec(-30.0f64..30.0, 26)) {
            let raw = Matrix::from_vec(26, 1, vals).unwrap();
            let g = monotone_reparam(&raw);
            for m in 1..26 {
                prop_assert!(g[(m, 0)] > g[(m - 1, 0)]);
            }
        }
    }

    #[test]
    fn nll_examples() {
        let basis = unit_basis(1);
        let theta = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let g = nll(ErrorDistribution::Gaussian, &basis, &[0.5], &theta, &[0.0]).unwrap();
        assert!((g - 1.043_938_533_204_672_8).abs() < 1e-12);
        // hand evaluation of -log(exp(-0.5) / (1 + exp(-0.5))^2)
        let e: f64 = (-0.5_f64).exp();
        let oracle = -(e / ((1.0 + e) * (1.0 + e))).ln();
        assert!((oracle - 1.448_153_968_360_213_4).abs() < 1e-12);
        let l = nll(ErrorDistribution::Logistic, &basis, &[0.5], &theta, &[0.0]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        // shifting beta changes only the density term
        let shifted = nll(ErrorDistribution::Gaussian, &basis, &[0.5], &theta, &[0.7]).unwrap();
        assert!((shifted - (0.5 * 1.2 * 1.2 + 0.918_938_533_204_672_8)).abs() < 1e-12);
        let flat = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        match nll(ErrorDistribution::Gaussian, &basis, &[0.5, 0.5], &flat, &[0.0, 0.0]) {
            Err(CoreError::Jacobian { rows }) => assert_eq!(rows, vec![0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_is_additive_in_shift() {
        let basis = BernsteinBasis::new(4, -3.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y: Vec<f64> = (0..30).map(|_| Uniform::new(-2.5, 2.5).unwrap().sample(&mut rng)).collect();
        let raw = Matrix::from_fn(5, 1, |_, _| StandardNormal.sample(&mut rng));
        let gamma = monotone_reparam(&raw);
        let theta = Matrix::from_fn(30, 5, |_, m| gamma[(m, 0)]);
        let beta: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let combined = nll(ErrorDistribution::Logistic, &basis, &y, &theta, &beta).unwrap();
        // direct evaluation: h = h1 + h2 inside F_Z
        let a = basis.eval(&y).unwrap().values;
        let ap = basis.deriv(&y).unwrap().values;
        let mut direct = 0.0;
        for i in 0..30 {
            let h1 = crate::linalg::dot(a.row(i), theta.row(i));
            let j = crate::linalg::dot(ap.row(i), theta.row(i));
            direct += -ErrorDistribution::Logistic.log_pdf(h1 + beta[i]).unwrap() - j.ln();
        }
        assert!((combined - direct / 30.0).abs() < 1e-12);
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let x1: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let x2: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let y: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + 2.0 * a - b + (0.5 * b).exp() * z
            })
            .collect();
        Dataset::new("y", y, vec!["x1".into(), "x2".into()], vec![x1, x2]).unwrap()
    }

    fn toy_spec(deep: bool) -> ModelSpec {
        let mut terms = vec![
            TermSpec::new("int", Target::Interaction, TermKind::Intercept),
            TermSpec::new(
                "s2",
                Target::Both,
                TermKind::Smooth { feature: "x2".into(), q: 10, degree: 3, penalty_order: 2, df: None, lambda: Some(2.0) },
            ),
            TermSpec::new("l1", Target::Shift, TermKind::linear("x1")),
        ];
        if deep {
            terms.push(TermSpec::new("d", Target::Interaction, TermKind::deep(vec!["x1".into(), "x2".into()], vec![4, 1])));
            terms.push(TermSpec::new(
                "ds",
                Target::Shift,
                TermKind::Deep { features: vec!["x1".into()], layers: vec![3, 1], orthogonalize: true },
            ));
        }
        let mut s = ModelSpec::new(ErrorDistribution::Gaussian, 4, terms);
        s.lambda_y = 0.3;
        s
    }

    fn toy_objective_check(deep: bool, seed: u64) -> f64 {
        let data = toy_data(40, seed);
        let spec = toy_spec(deep);
        let basis = BernsteinBasis::from_outcomes(spec.order, data.outcome().unwrap()).unwrap();
        let (layout, _) = Layout::from_training_data(&spec, basis, &data).unwrap();
        let design = layout.design(&data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut params = layout.init_params(&design, &mut rng).unwrap();
        for v in params.psi.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = 0.3 * z;
        }
        let obj = Objective::new(&layout, design, 40).unwrap();
        let (lv, grad) = obj.loss_and_grad(&params).unwrap();
        assert!(lv.total.is_finite() && lv.violations.is_empty());
        let theta = params.flatten();
        let mut worst: f64 = 0.0;
        for k in 0..theta.len() {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let mut probe = params.clone();
            let mut t = theta.clone();
            t[k] += h;
            probe.assign(&t).unwrap();
            let lp = obj.loss(&probe).unwrap().total;
            t[k] -= 2.0 * h;
            probe.assign(&t).unwrap();
            let lm = obj.loss(&probe).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4));
        }
        worst
    }

    #[test]
    fn structured_gradient_is_exact() {
        for seed in 0..3 {
            let w = toy_objective_check(false, seed);
            assert!(w < 1e-6, "seed {seed}: {w}");
        }
    }

    #[test]
    fn deep_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let w = toy_objective_check(true, seed);
            assert!(w < 1e-4, "seed {seed}: {w}");
        }
    }

    #[test]
    fn penalty_forms_agree() {
        let data = toy_data(40, 5);
        let spec = toy_spec(false);
        let basis = BernsteinBasis::from_outcomes(spec.order, data.outcome().unwrap()).unwrap();
        let (layout, _) = Layout::from_training_data(&spec, basis, &data).unwrap();
        let pens = layout.penalties().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma = Matrix::from_fn(5, layout.p(), |_, _| StandardNormal.sample(&mut rng));
        let psi: Vec<f64> = (0..layout.q()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let full = layout.interaction_penalty().unwrap();
        let direct = full.quad_form(gamma.as_slice()) + pens.shift.quad_form(&psi);
        assert!((direct - pens.value(&gamma, &psi)).abs() < 1e-10 * (1.0 + direct.abs()));
        // constant along the feature direction of a smooth block: no penalty there
        let mut flat = Matrix::zeros(5, layout.p());
        let r = layout.interaction_index().range("s2").unwrap();
        for m in 0..5 {
            for p in r.clone() {
                flat[(m, p)] = 2.0;
            }
        }
        let no_y = Penalties { y_dir: None, ..pens.clone() };
        assert!(no_y.value(&flat, &vec![0.0; layout.q()]).abs() < 1e-10);
        let doubled = Penalties { y_dir: pens.y_dir.as_ref().map(|m| m.scale(2.0)), inter: pens.inter.scale(2.0), shift: pens.shift.scale(2.0) };
        assert!((doubled.value(&gamma, &psi) - 2.0 * pens.value(&gamma, &psi)).abs() < 1e-9);
        let zero = Penalties { y_dir: None, inter: pens.inter.scale(0.0), shift: pens.shift.scale(0.0) };
        assert_eq!(zero.value(&gamma, &psi), 0.0);
    }

    fn identity_conditional() -> Conditional {
        // h1(y) = 4y - 2 on [0, 1]
        let theta = Matrix::from_rows(&[vec![-2.0, 2.0]]).unwrap();
        Conditional::from_parts(unit_basis(1), ErrorDistribution::Gaussian, theta, vec![0.0]).unwrap()
    }

    #[test]
    fn prediction_examples() {
        let c = identity_conditional();
        let g = ErrorDistribution::Gaussian;
        assert!((c.cdf(0, 0.3) - g.cdf(-0.8).unwrap()).abs() < 1e-15);
        assert!((c.density(0, 0.3) - 4.0 * g.pdf(-0.8)).abs() < 1e-14);
        assert!(c.cdf(0, 0.0) < 0.05 && c.cdf(0, 1.0) > 0.95);
        let q = c.quantile(0, 0.5).unwrap();
        assert!((q.value - 0.5).abs() < 1e-10 && !q.boundary && q.iterations <= QUANTILE_MAX_ITER);
        let far = c.quantile(0, 0.9999).unwrap();
        assert!(far.boundary && far.value == 1.0);
        let low = c.quantile(0, 1e-6).unwrap();
        assert!(low.boundary && low.value == 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let theta = Matrix::from_rows(&[vec![-3.0, -1.0, -0.5, 2.0, 4.0]]).unwrap();
        for d in [ErrorDistribution::Gaussian, ErrorDistribution::Logistic, ErrorDistribution::MinExtremeValue] {
            let c = Conditional::from_parts(BernsteinBasis::new(4, 2.0, 7.0).unwrap(), d, theta.clone(), vec![0.4]).unwrap();
            for k in 1..20 {
                let p = k as f64 / 20.0;
                let q = c.quantile(0, p).unwrap();
                assert!(q.boundary || (c.cdf(0, q.value) - p).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn density_integrates_to_cdf_difference() {
        let theta = Matrix::from_rows(&[vec![-3.0, -1.0, -0.5, 2.0, 4.0]]).unwrap();
        let c = Conditional::from_parts(BernsteinBasis::new(4, 2.0, 7.0).unwrap(), ErrorDistribution::Logistic, theta, vec![0.4])
            .unwrap();
        let xs = linspace(2.0, 7.0, 201);
        let h = 5.0 / 200.0;
        let mut s = c.density(0, xs[0]) + c.density(0, xs[200]);
        for (k, &x) in xs.iter().enumerate().take(200).skip(1) {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * c.density(0, x);
        }
        let integral = s * h / 3.0;
        assert!((integral - (c.cdf(0, 7.0) - c.cdf(0, 2.0))).abs() < 1e-4);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(ErrorDistribution::Gaussian, 0, vec![TermSpec::new("i", Target::Interaction, TermKind::Intercept)])
            .validate()
            .is_err());
        assert!(ModelSpec::new(ErrorDistribution::Gaussian, 3, vec![TermSpec::new("l", Target::Shift, TermKind::linear("x"))])
            .validate()
            .is_err());
        let dup = vec![
            TermSpec::new("i", Target::Interaction, TermKind::Intercept),
            TermSpec::new("i", Target::Shift, TermKind::linear("x")),
        ];
        assert!(ModelSpec::new(ErrorDistribution::Gaussian, 3, dup).validate().is_err());
    }

    #[test]
    fn params_flatten_round_trip() {
        let data = toy_data(40, 9);
        let spec = toy_spec(true);
        let basis = BernsteinBasis::from_outcomes(spec.order, data.outcome().unwrap()).unwrap();
        let (layout, _) = Layout::from_training_data(&spec, basis, &data).unwrap();
        let design = layout.design(&data).unwrap();
        let params = layout.init_params(&design, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.len());
        let mut other = params.clone();
        other.assign(&vec![0.0; flat.len()]).unwrap();
        other.assign(&flat).unwrap();
        assert_eq!(other, params);
        assert!(other.assign(&flat[1..]).is_err());
    }
}
