//! Predictor terms and their design blocks.
//!
//! Each term becomes a block of columns in the interaction design (the
//! features multiplying the Bernstein coefficients) or the shift design.
//! Training-time statistics such as knots, column means and non-negativity
//! shifts are recorded in [`BlockState`] and replayed verbatim at prediction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::basis::{kron_sum_penalty, tensor_basis, PenaltyMatrix, SplineBasis};
use crate::data::Dataset;
use crate::error::{config_err, dim_err, CoreError, Result};
use crate::linalg::{Matrix, PivotedQr};
use crate::math;

/// Floor added to every non-negativity shift.
pub const NONNEG_EPS: f64 = 1e-3;

/// Relative tolerance for rank decisions in the orthogonalization cell.
pub const ORTH_TOL: f64 = 1e-10;

/// Which predictor(s) a configured term feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Interaction,
    Shift,
    Both,
}

impl Target {
    pub fn sides(self) -> &'static [Side] {
        match self {
            Target::Interaction => &[Side::Interaction],
            Target::Shift => &[Side::Shift],
            Target::Both => &[Side::Interaction, Side::Shift],
        }
    }
}

/// One of the two predictors of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Columns of `B`, multiplied by the monotone coefficient matrix.
    Interaction,
    /// Columns of `C`, weighted by the shift coefficients.
    Shift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Linear {
        feature: String,
    },
    Smooth {
        feature: String,
        q: usize,
        degree: usize,
        penalty_order: usize,
        df: Option<f64>,
        lambda: Option<f64>,
    },
    /// Row-wise tensor product of two marginal cubic B-spline bases.
    TensorSmooth {
        features: [String; 2],
        q: usize,
        df: Option<f64>,
        lambda: Option<f64>,
    },
    /// Multilayer perceptron; the last entry of `layers` is the output width.
    Deep {
        features: Vec<String>,
        layers: Vec<usize>,
        orthogonalize: bool,
    },
}

impl TermKind {
    pub fn smooth(feature: impl Into<String>) -> Self {
        TermKind::Smooth { feature: feature.into(), q: 10, degree: 3, penalty_order: 2, df: None, lambda: None }
    }

    pub fn linear(feature: impl Into<String>) -> Self {
        TermKind::Linear { feature: feature.into() }
    }

    pub fn deep(features: Vec<String>, layers: Vec<usize>) -> Self {
        TermKind::Deep { features, layers, orthogonalize: false }
    }

    pub fn is_deep(&self) -> bool {
        matches!(self, TermKind::Deep { .. })
    }

    pub fn features(&self) -> Vec<&str> {
        match self {
            TermKind::Intercept => vec![],
            TermKind::Linear { feature } | TermKind::Smooth { feature, .. } => vec![feature.as_str()],
            TermKind::TensorSmooth { features, .. } => features.iter().map(String::as_str).collect(),
            TermKind::Deep { features, .. } => features.iter().map(String::as_str).collect(),
        }
    }

    /// Number of design columns the term contributes.
    pub fn width(&self) -> usize {
        match self {
            TermKind::Intercept | TermKind::Linear { .. } => 1,
            TermKind::Smooth { q, .. } => *q,
            TermKind::TensorSmooth { q, .. } => q * q,
            TermKind::Deep { layers, .. } => layers.last().copied().unwrap_or(0),
        }
    }

    pub fn df(&self) -> Option<f64> {
        match self {
            TermKind::Smooth { df, .. } | TermKind::TensorSmooth { df, .. } => *df,
            _ => None,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            TermKind::Smooth { lambda, .. } | TermKind::TensorSmooth { lambda, .. } => *lambda,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub target: Target,
    pub kind: TermKind,
}

impl TermSpec {
    pub fn new(name: impl Into<String>, target: Target, kind: TermKind) -> Self {
        Self { name: name.into(), target, kind }
    }

    /// Checks that do not need data.
    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if name.is_empty() {
            return Err(config_err("term names must be non-empty"));
        }
        match &self.kind {
            TermKind::Intercept if self.target != Target::Interaction => Err(config_err(format!(
                "term `{name}`: an intercept belongs to the interaction predictor; on the shift side it is absorbed by h1"
            ))),
            TermKind::Smooth { q, degree, penalty_order, df, lambda, .. } => {
                if *q < 3 || *q < degree + 1 {
                    return Err(config_err(format!("term `{name}`: q={q} too small for degree {degree}")));
                }
                if *penalty_order < 1 || penalty_order >= q {
                    return Err(config_err(format!("term `{name}`: penalty order must be in [1, q)")));
                }
                check_df(name, *df, *penalty_order as f64, *q as f64)?;
                check_lambda(name, *lambda)
            }
            TermKind::TensorSmooth { q, df, lambda, .. } => {
                if *q < 4 {
                    return Err(config_err(format!("term `{name}`: tensor smooths need q >= 4 per margin")));
                }
                check_df(name, *df, 4.0, (q * q) as f64)?;
                check_lambda(name, *lambda)
            }
            TermKind::Deep { features, layers, orthogonalize } => {
                if features.is_empty() {
                    return Err(config_err(format!("term `{name}`: deep terms need at least one feature")));
                }
                if layers.is_empty() || layers.iter().any(|&w| w == 0) {
                    return Err(config_err(format!("term `{name}`: layer widths must be positive and non-empty")));
                }
                if *orthogonalize && self.target != Target::Shift {
                    return Err(config_err(format!(
                        "term `{name}`: orthogonalization is only available for shift-side deep terms"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn check_df(name: &str, df: Option<f64>, lo: f64, hi: f64) -> Result<()> {
    match df {
        Some(d) if !(d >= lo && d <= hi) => {
            Err(config_err(format!("term `{name}`: df={d} outside the attainable range [{lo}, {hi}]")))
        }
        _ => Ok(()),
    }
}

fn check_lambda(name: &str, lambda: Option<f64>) -> Result<()> {
    match lambda {
        Some(l) if !(l >= 0.0 && l.is_finite()) => Err(config_err(format!("term `{name}`: lambda must be >= 0"))),
        _ => Ok(()),
    }
}

/// Evaluated design columns of one term, with their constraint bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub columns: Matrix,
    pub penalty: Option<PenaltyMatrix>,
    pub lambda: f64,
    /// Column means removed by the sum-to-zero constraint.
    pub center_offsets: Option<Vec<f64>>,
    /// Constant added to make interaction-side columns non-negative.
    pub nonneg_shift: Option<f64>,
    pub degenerate: Vec<usize>,
    pub warnings: BlockWarnings,
}

impl DesignBlock {
    pub fn new(columns: Matrix) -> Self {
        Self {
            columns,
            penalty: None,
            lambda: 0.0,
            center_offsets: None,
            nonneg_shift: None,
            degenerate: Vec::new(),
            warnings: BlockWarnings::default(),
        }
    }
}

/// Counters for policies that repair inputs instead of rejecting them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWarnings {
    /// Feature values clamped into the spline support.
    pub clamped_features: usize,
    /// Entries still negative after the stored non-negativity shift, set to zero.
    pub negative_entries: usize,
}

impl BlockWarnings {
    pub fn merge(&mut self, other: BlockWarnings) {
        self.clamped_features += other.clamped_features;
        self.negative_entries += other.negative_entries;
    }
}

/// Training-time state of a block, replayed at prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub name: String,
    pub side: Side,
    pub kind: TermKind,
    pub splines: Vec<SplineBasis>,
    pub center_offsets: Option<Vec<f64>>,
    pub nonneg_shift: Option<f64>,
    pub degenerate: Vec<usize>,
    pub penalty: Option<PenaltyMatrix>,
    pub lambda: f64,
    /// Per-feature `(mean, sd)` used to standardize deep-term inputs.
    pub input_scaling: Option<Vec<(f64, f64)>>,
}

impl BlockState {
    pub fn width(&self) -> usize {
        self.kind.width()
    }

    pub fn is_deep(&self) -> bool {
        self.kind.is_deep()
    }
}

/// Evaluates a term on `data` for one side of the model.
///
/// Without `state` the block is built in training mode and the returned
/// state records everything needed to replay it; with `state` the stored
/// knots, offsets and shifts are reused. Deep terms return their
/// standardized input matrix; their output columns come from the network.
pub fn evaluate_block(
    spec: &TermSpec,
    side: Side,
    data: &Dataset,
    state: Option<&BlockState>,
) -> Result<(DesignBlock, BlockState)> {
    spec.validate()?;
    if let Some(s) = state {
        if s.name != spec.name || s.side != side || s.kind != spec.kind {
            return Err(config_err(format!("fitted state does not belong to term `{}`", spec.name)));
        }
    }
    let training = state.is_none();
    let n = data.n();
    let mut warnings = BlockWarnings::default();
    let mut splines = state.map(|s| s.splines.clone()).unwrap_or_default();
    let mut input_scaling = state.and_then(|s| s.input_scaling.clone());
    let mut penalty = None;

    let raw = match &spec.kind {
        TermKind::Intercept => Matrix::filled(n, 1, 1.0),
        TermKind::Linear { feature } => Matrix::column(data.feature(feature)?),
        TermKind::Smooth { feature, q, degree, penalty_order, .. } => {
            let x = data.feature(feature)?;
            if training {
                let (lo, hi) = feature_range(x, feature)?;
                splines = vec![SplineBasis::equidistant(lo, hi, *q, *degree, *penalty_order)?];
            }
            let spline = splines.first().ok_or_else(|| CoreError::MissingState(spec.name.clone()))?;
            penalty = Some(spline.penalty()?);
            let e = spline.eval(x)?;
            warnings.clamped_features += e.clamped;
            e.values
        }
        TermKind::TensorSmooth { features, q, .. } => {
            let xa = data.feature(&features[0])?;
            let xb = data.feature(&features[1])?;
            if training {
                let (la, ha) = feature_range(xa, &features[0])?;
                let (lb, hb) = feature_range(xb, &features[1])?;
                splines = vec![
                    SplineBasis::equidistant(la, ha, *q, 3, 2)?,
                    SplineBasis::equidistant(lb, hb, *q, 3, 2)?,
                ];
            }
            if splines.len() != 2 {
                return Err(CoreError::MissingState(spec.name.clone()));
            }
            let ea = splines[0].eval(xa)?;
            let eb = splines[1].eval(xb)?;
            warnings.clamped_features += ea.clamped + eb.clamped;
            let pa = splines[0].penalty()?;
            let pb = splines[1].penalty()?;
            penalty = Some(kron_sum_penalty(&pa, 1.0, &pb, 1.0)?);
            tensor_basis(&ea.values, &eb.values)?
        }
        TermKind::Deep { features, .. } => {
            let cols: Vec<&[f64]> = features.iter().map(|f| data.feature(f)).collect::<Result<_>>()?;
            if training {
                input_scaling = Some(cols.iter().map(|c| mean_sd(c)).collect());
            }
            let scaling = input_scaling.as_ref().ok_or_else(|| CoreError::MissingState(spec.name.clone()))?;
            Matrix::from_fn(n, cols.len(), |i, j| (cols[j][i] - scaling[j].0) / scaling[j].1)
        }
    };

    let mut block = DesignBlock::new(raw);
    block.penalty = penalty;
    block.warnings = warnings;
    block.lambda = state.map_or(0.0, |s| s.lambda);
    if matches!(spec.kind, TermKind::Smooth { .. } | TermKind::TensorSmooth { .. }) {
        if let Some(s) = state {
            block.center_offsets = s.center_offsets.clone();
        }
        block = apply_sum_to_zero(block, training)?;
    }
    if side == Side::Interaction && matches!(spec.kind, TermKind::Linear { .. } | TermKind::Smooth { .. } | TermKind::TensorSmooth { .. }) {
        if let Some(s) = state {
            block.nonneg_shift = s.nonneg_shift;
        }
        block = apply_nonneg_shift(block, training)?;
    }
    if let Some(s) = state {
        block.degenerate = s.degenerate.clone();
    }
    let new_state = BlockState {
        name: spec.name.clone(),
        side,
        kind: spec.kind.clone(),
        splines,
        center_offsets: block.center_offsets.clone(),
        nonneg_shift: block.nonneg_shift,
        degenerate: block.degenerate.clone(),
        penalty: block.penalty.clone(),
        lambda: block.lambda,
        input_scaling,
    };
    Ok((block, new_state))
}

fn feature_range(x: &[f64], name: &str) -> Result<(f64, f64)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(config_err(format!("feature `{name}` is constant; a smooth term needs spread")));
    }
    Ok((lo, hi))
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = math::sqrt(var);
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Sum-to-zero constraint by column centering.
///
/// Training mode stores the column means and flags columns that vanish after
/// centering; prediction mode subtracts the stored means.
pub fn apply_sum_to_zero(mut block: DesignBlock, training: bool) -> Result<DesignBlock> {
    let means = if training {
        let m = block.columns.col_means();
        block.degenerate = (0..block.columns.ncols())
            .filter(|&j| {
                let scale = 1.0 + m[j].abs();
                (0..block.columns.nrows()).all(|i| (block.columns[(i, j)] - m[j]).abs() <= 1e-12 * scale)
            })
            .collect();
        m
    } else {
        block.center_offsets.clone().ok_or_else(|| CoreError::MissingState("sum-to-zero offsets".to_string()))?
    };
    if means.len() != block.columns.ncols() {
        return Err(dim_err("stored column means do not match the block width"));
    }
    for i in 0..block.columns.nrows() {
        for (v, m) in block.columns.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    for &j in &block.degenerate {
        for i in 0..block.columns.nrows() {
            block.columns[(i, j)] = 0.0;
        }
    }
    block.center_offsets = Some(means);
    Ok(block)
}

/// Shifts interaction-side columns so every entry is non-negative.
///
/// Training mode stores `max(0, -min) + eps`; prediction reuses it and sets
/// entries that remain negative to zero, counting them.
pub fn apply_nonneg_shift(mut block: DesignBlock, training: bool) -> Result<DesignBlock> {
    let shift = if training {
        (-block.columns.min_value()).max(0.0) + NONNEG_EPS
    } else {
        block.nonneg_shift.ok_or_else(|| CoreError::MissingState("non-negativity shift".to_string()))?
    };
    let mut negative = 0;
    for v in block.columns.as_mut_slice() {
        *v += shift;
        if *v < 0.0 {
            *v = 0.0;
            negative += 1;
        }
    }
    block.warnings.negative_entries += negative;
    block.nonneg_shift = Some(shift);
    Ok(block)
}

/// Projects `deep_out` onto the orthogonal complement of the column span of
/// `structured`. Linearly dependent structured columns are dropped; their
/// count is returned alongside the projection.
pub fn orthogonalize(deep_out: &Matrix, structured: &Matrix) -> Result<(Matrix, usize)> {
    if deep_out.nrows() != structured.nrows() {
        return Err(dim_err(format!(
            "deep output has {} rows, structured design {}",
            deep_out.nrows(),
            structured.nrows()
        )));
    }
    let qr = PivotedQr::new(structured, ORTH_TOL);
    Ok((qr.project_out(deep_out)?, qr.dropped.len()))
}

/// Column ranges of each named block within an assembled design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIndex {
    entries: Vec<(String, Range<usize>)>,
}

impl BlockIndex {
    pub fn from_widths<'a>(blocks: impl IntoIterator<Item = (&'a str, usize)>) -> Result<Self> {
        let mut entries: Vec<(String, Range<usize>)> = Vec::new();
        let mut off = 0;
        for (name, w) in blocks {
            if entries.iter().any(|(n, _)| n == name) {
                return Err(config_err(format!("duplicate term name `{name}`")));
            }
            entries.push((name.to_string(), off..off + w));
            off += w;
        }
        Ok(Self { entries })
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }

    /// Term owning a design column.
    pub fn owner(&self, col: usize) -> Option<&str> {
        self.entries.iter().find(|(_, r)| r.contains(&col)).map(|(n, _)| n.as_str())
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |(_, r)| r.end)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.entries.iter().map(|(n, r)| (n.as_str(), r.clone()))
    }
}

/// Horizontally concatenates named blocks and records their column ranges.
pub fn assemble_design(blocks: &[(&str, &Matrix)]) -> Result<(Matrix, BlockIndex)> {
    if blocks.is_empty() {
        return Err(config_err("cannot assemble a design from zero blocks"));
    }
    let index = BlockIndex::from_widths(blocks.iter().map(|(n, m)| (*n, m.ncols())))?;
    let mats: Vec<&Matrix> = blocks.iter().map(|(_, m)| *m).collect();
    Ok((Matrix::hcat(&mats)?, index))
}

/// Ranks a smooth block's design matrix: its unpenalized flexibility.
pub fn design_rank(columns: &Matrix) -> usize {
    PivotedQr::new(columns, 1e-9).rank()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        let x1: Vec<f64> = (0..40).map(|i| -1.0 + 2.0 * i as f64 / 39.0).collect();
        let x2: Vec<f64> = (0..40).map(|i| math::sin(i as f64)).collect();
        Dataset::new("y", vec![0.0; 40], vec!["x1".into(), "x2".into()], vec![x1, x2]).unwrap()
    }

    #[test]
    fn intercept_and_linear() {
        let d = Dataset::new("y", vec![0.0; 3], vec!["x1".into()], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let t = TermSpec::new("int", Target::Interaction, TermKind::Intercept);
        let (b, _) = evaluate_block(&t, Side::Interaction, &d, None).unwrap();
        assert_eq!(b.columns.as_slice(), &[1.0, 1.0, 1.0]);
        let l = TermSpec::new("lin", Target::Shift, TermKind::linear("x1"));
        let (b, _) = evaluate_block(&l, Side::Shift, &d, None).unwrap();
        assert_eq!(b.columns.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn smooth_columns_are_centered() {
        let t = TermSpec::new("s", Target::Shift, TermKind::smooth("x1"));
        let (b, st) = evaluate_block(&t, Side::Shift, &data(), None).unwrap();
        assert_eq!(b.columns.ncols(), 10);
        assert!(b.columns.col_means().iter().all(|m| m.abs() < 1e-10));
        assert_eq!(st.splines.len(), 1);
        assert_eq!(b.penalty.as_ref().unwrap().dim(), 10);
    }

    #[test]
    fn unknown_feature_and_missing_state() {
        let t = TermSpec::new("s", Target::Shift, TermKind::smooth("nope"));
        assert!(matches!(evaluate_block(&t, Side::Shift, &data(), None), Err(CoreError::UnknownFeature(_))));
        let b = DesignBlock::new(Matrix::zeros(2, 2));
        assert!(matches!(apply_sum_to_zero(b.clone(), false), Err(CoreError::MissingState(_))));
        assert!(apply_nonneg_shift(b, false).is_err());
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let d = data();
        let specs = [
            (TermSpec::new("s", Target::Interaction, TermKind::smooth("x2")), Side::Interaction),
            (
                TermSpec::new(
                    "t",
                    Target::Shift,
                    TermKind::TensorSmooth { features: ["x1".into(), "x2".into()], q: 5, df: None, lambda: None },
                ),
                Side::Shift,
            ),
            (TermSpec::new("l", Target::Interaction, TermKind::linear("x1")), Side::Interaction),
            (TermSpec::new("d", Target::Shift, TermKind::deep(vec!["x1".into(), "x2".into()], vec![4, 1])), Side::Shift),
        ];
        for (spec, side) in &specs {
            let (train, state) = evaluate_block(spec, *side, &d, None).unwrap();
            let (replay, _) = evaluate_block(spec, *side, &d, Some(&state)).unwrap();
            assert_eq!(train.columns, replay.columns, "{}", spec.name);
        }
    }

    #[test]
    fn sum_to_zero_examples() {
        let centered = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let out = apply_sum_to_zero(DesignBlock::new(centered.clone()), true).unwrap();
        assert_eq!(out.columns, centered);
        let constant = Matrix::from_rows(&[vec![2.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let out = apply_sum_to_zero(DesignBlock::new(constant), true).unwrap();
        assert_eq!(out.degenerate, vec![0]);
        assert_eq!(out.columns.col(0), vec![0.0, 0.0]);
        let mut pred = DesignBlock::new(Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap());
        pred.center_offsets = Some(vec![1.5, -0.5]);
        assert_eq!(apply_sum_to_zero(pred, false).unwrap().columns.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn nonneg_shift_examples() {
        let b = DesignBlock::new(Matrix::from_rows(&[vec![-2.0, 1.0], vec![0.5, 3.0]]).unwrap());
        let out = apply_nonneg_shift(b, true).unwrap();
        assert!((out.nonneg_shift.unwrap() - 2.001).abs() < 1e-15);
        assert!((out.columns.min_value() - 0.001).abs() < 1e-12);
        let b = DesignBlock::new(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert_eq!(apply_nonneg_shift(b, true).unwrap().nonneg_shift, Some(NONNEG_EPS));
        let mut pred = DesignBlock::new(Matrix::from_rows(&[vec![-5.0, 0.0]]).unwrap());
        pred.nonneg_shift = Some(2.001);
        let out = apply_nonneg_shift(pred, false).unwrap();
        assert_eq!(out.columns.as_slice(), &[0.0, 2.001]);
        assert_eq!(out.warnings.negative_entries, 1);
    }

    #[test]
    fn orthogonalize_examples() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 5.0]]).unwrap();
        let (out, dropped) = orthogonalize(&Matrix::column(&s.col(1)), &s).unwrap();
        assert_eq!(dropped, 0);
        assert!(out.max_abs() < 1e-12);
        let ones = Matrix::filled(4, 1, 1.0);
        let u = Matrix::column(&[1.0, 2.0, 3.0, 6.0]);
        let (c, _) = orthogonalize(&u, &ones).unwrap();
        assert!(c.as_slice().iter().zip([-2.0, -1.0, 0.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let (again, _) = orthogonalize(&c, &ones).unwrap();
        assert!(again.sub(&c).unwrap().max_abs() < 1e-10);
        assert!(orthogonalize(&Matrix::zeros(3, 1), &ones).is_err());
    }

    #[test]
    fn assemble_examples() {
        let a = Matrix::filled(2, 1, 1.0);
        let b = Matrix::zeros(2, 10);
        let c = Matrix::zeros(2, 3);
        let (m, idx) = assemble_design(&[("t1", &a), ("t2", &b), ("t3", &c)]).unwrap();
        assert_eq!(m.ncols(), 14);
        assert_eq!(idx.range("t1"), Some(0..1));
        assert_eq!(idx.range("t2"), Some(1..11));
        assert_eq!(idx.range("t3"), Some(11..14));
        assert_eq!(idx.owner(12), Some("t3"));
        assert!(assemble_design(&[("t", &a), ("t", &a)]).is_err());
        assert!(assemble_design(&[]).is_err());
    }

    #[test]
    fn validation_rules() {
        assert!(TermSpec::new("i", Target::Shift, TermKind::Intercept).validate().is_err());
        let mut k = TermKind::smooth("x");
        if let TermKind::Smooth { df, .. } = &mut k {
            *df = Some(11.0);
        }
        assert!(TermSpec::new("s", Target::Shift, k).validate().is_err());
        let deep = TermKind::Deep { features: vec!["x".into()], layers: vec![4, 1], orthogonalize: true };
        assert!(TermSpec::new("d", Target::Interaction, deep.clone()).validate().is_err());
        assert!(TermSpec::new("d", Target::Shift, deep).validate().is_ok());
    }
}
