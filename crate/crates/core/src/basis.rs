//! Bernstein polynomial and B-spline bases, their row-wise tensor products and
//! difference penalties.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, CoreError, Result};
use crate::linalg::Matrix;
use crate::math;

/// Above this order binomial weights are formed in log space.
const LOG_SPACE_ORDER: usize = 30;

/// A basis matrix together with the number of inputs that had to be clamped
/// into the basis support.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub values: Matrix,
    pub clamped: usize,
}

/// Bernstein polynomials of order `M` on the outcome interval `[lower, upper]`.
///
/// Entry `m` of the basis at `y` is `C(M, m) t^m (1 - t)^(M - m)` with
/// `t = (y - lower) / (upper - lower)`; these are Beta densities scaled by
/// `1 / (M + 1)`, so the row sums to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinBasis {
    order: usize,
    lower: f64,
    upper: f64,
}

impl BernsteinBasis {
    pub fn new(order: usize, lower: f64, upper: f64) -> Result<Self> {
        if order < 1 {
            return Err(config_err("Bernstein order must be at least 1"));
        }
        if !lower.is_finite() || !upper.is_finite() || upper <= lower {
            return Err(config_err(format!("outcome bounds need lower < upper, got [{lower}, {upper}]")));
        }
        Ok(Self { order, lower, upper })
    }

    /// Bounds `min(y) - 5% range` and `max(y) + 5% range` from training outcomes.
    pub fn from_outcomes(order: usize, y: &[f64]) -> Result<Self> {
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { what: "outcome", row });
        }
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(CoreError::DegenerateOutcome(format!("outcome has zero variance (all values {lo})")));
        }
        Self::new(order, lo - 0.05 * range, hi + 0.05 * range)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn dim(&self) -> usize {
        self.order + 1
    }

    /// Position of `y` on the unit interval, clamped; the flag reports clamping.
    pub fn normalize(&self, y: f64) -> (f64, bool) {
        let t = (y - self.lower) / (self.upper - self.lower);
        if t < 0.0 {
            (0.0, true)
        } else if t > 1.0 {
            (1.0, true)
        } else {
            (t, false)
        }
    }

    /// Basis values at one outcome value, written into `out` (length `M + 1`).
    pub fn eval_into(&self, y: f64, out: &mut [f64]) -> bool {
        let (t, clamped) = self.normalize(y);
        bernstein_row(self.order, t, out);
        clamped
    }

    /// Derivatives `d a(y) / d y` at one outcome value.
    pub fn deriv_into(&self, y: f64, out: &mut [f64]) -> bool {
        let (t, clamped) = self.normalize(y);
        let m = self.order;
        let mut lower = vec![0.0; m];
        bernstein_row(m - 1, t, &mut lower);
        let scale = m as f64 / (self.upper - self.lower);
        for (k, o) in out.iter_mut().enumerate() {
            let left = if k > 0 { lower[k - 1] } else { 0.0 };
            let right = if k < m { lower[k] } else { 0.0 };
            *o = scale * (left - right);
        }
        clamped
    }

    /// Basis matrix `n x (M + 1)`.
    pub fn eval(&self, y: &[f64]) -> Result<BasisEval> {
        self.fill(y, |b, v, out| b.eval_into(v, out))
    }

    /// Derivative matrix `n x (M + 1)`, already scaled by `1 / (upper - lower)`.
    pub fn deriv(&self, y: &[f64]) -> Result<BasisEval> {
        self.fill(y, |b, v, out| b.deriv_into(v, out))
    }

    fn fill(&self, y: &[f64], f: impl Fn(&Self, f64, &mut [f64]) -> bool) -> Result<BasisEval> {
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { what: "outcome", row });
        }
        let mut values = Matrix::zeros(y.len(), self.dim());
        let mut clamped = 0;
        for (i, &v) in y.iter().enumerate() {
            if f(self, v, values.row_mut(i)) {
                clamped += 1;
            }
        }
        Ok(BasisEval { values, clamped })
    }
}

fn bernstein_row(order: usize, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), order + 1);
    if order == 0 {
        out[0] = 1.0;
        return;
    }
    if order <= LOG_SPACE_ORDER {
        let mut binom = 1.0;
        for (m, o) in out.iter_mut().enumerate() {
            *o = binom * math::powi(t, m as i32) * math::powi(1.0 - t, (order - m) as i32);
            binom = binom * (order - m) as f64 / (m + 1) as f64;
        }
        return;
    }
    if t <= 0.0 || t >= 1.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[if t <= 0.0 { 0 } else { order }] = 1.0;
        return;
    }
    let (lt, l1t) = (math::ln(t), math::ln_1p(-t));
    let ln_fact_m = math::ln_gamma(order as f64 + 1.0);
    for (m, o) in out.iter_mut().enumerate() {
        let ln_binom = ln_fact_m - math::ln_gamma(m as f64 + 1.0) - math::ln_gamma((order - m) as f64 + 1.0);
        *o = math::exp(ln_binom + m as f64 * lt + (order - m) as f64 * l1t);
    }
}

/// B-spline basis of given degree on a knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    num_basis: usize,
    degree: usize,
    knots: Vec<f64>,
    penalty_order: usize,
}

impl SplineBasis {
    /// `q` basis functions with equidistant knots whose interior span is exactly `[lo, hi]`.
    pub fn equidistant(lo: f64, hi: f64, q: usize, degree: usize, penalty_order: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(config_err(format!("spline range needs lo < hi, got [{lo}, {hi}]")));
        }
        if q < degree + 1 {
            return Err(config_err(format!("{q} basis functions cannot carry degree {degree}")));
        }
        let dx = (hi - lo) / (q - degree) as f64;
        let knots = (0..=q + degree).map(|j| lo + (j as f64 - degree as f64) * dx).collect();
        Self::with_knots(knots, degree, penalty_order)
    }

    pub fn with_knots(knots: Vec<f64>, degree: usize, penalty_order: usize) -> Result<Self> {
        if knots.len() < 2 * degree + 2 {
            return Err(config_err(format!(
                "degree {degree} needs at least {} knots, got {}",
                2 * degree + 2,
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) || knots.iter().any(|k| !k.is_finite()) {
            return Err(config_err("knots must be finite and ascending"));
        }
        let num_basis = knots.len() - degree - 1;
        if knots[num_basis] <= knots[degree] {
            return Err(config_err("knot vector has an empty support"));
        }
        Ok(Self { num_basis, degree, knots, penalty_order })
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn penalty_order(&self) -> usize {
        self.penalty_order
    }

    /// Interval on which the basis is a partition of unity.
    pub fn support(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.num_basis])
    }

    /// Basis values at one point, written into `out`; returns whether `x` was clamped.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> bool {
        let (lo, hi) = self.support();
        let (x, clamped) = if x < lo {
            (lo, true)
        } else if x > hi {
            (hi, true)
        } else {
            (x, false)
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        let p = self.degree;
        let t = &self.knots;
        // span index k with t[k] <= x < t[k+1], the last non-empty span at the right end
        let mut k = p;
        while k + 1 < self.num_basis && x >= t[k + 1] {
            k += 1;
        }
        while k > p && t[k] == t[k + 1] {
            k -= 1;
        }
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[k + 1 - j];
            right[j] = t[k + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (j, v) in n.into_iter().enumerate() {
            out[k - p + j] = v;
        }
        clamped
    }

    /// Basis matrix `n x q`.
    pub fn eval(&self, x: &[f64]) -> Result<BasisEval> {
        if let Some(row) = x.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { what: "feature", row });
        }
        let mut values = Matrix::zeros(x.len(), self.num_basis);
        let mut clamped = 0;
        for (i, &v) in x.iter().enumerate() {
            if self.eval_into(v, values.row_mut(i)) {
                clamped += 1;
            }
        }
        Ok(BasisEval { values, clamped })
    }

    pub fn penalty(&self) -> Result<PenaltyMatrix> {
        difference_penalty(self.num_basis, self.penalty_order)
    }
}

/// Row-wise Kronecker (transposed Khatri-Rao) product: row `i` of the result is
/// `bx[i] (x) bz[i]`.
pub fn tensor_basis(bx: &Matrix, bz: &Matrix) -> Result<Matrix> {
    if bx.nrows() != bz.nrows() {
        return Err(dim_err(format!("row counts differ: {} vs {}", bx.nrows(), bz.nrows())));
    }
    let (q1, q2) = (bx.ncols(), bz.ncols());
    let mut out = Matrix::zeros(bx.nrows(), q1 * q2);
    for i in 0..bx.nrows() {
        let (a, b) = (bx.row(i), bz.row(i));
        let o = out.row_mut(i);
        for (j, &aj) in a.iter().enumerate() {
            for (k, &bk) in b.iter().enumerate() {
                o[j * q2 + k] = aj * bk;
            }
        }
    }
    Ok(out)
}

/// Symmetric positive semi-definite penalty matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    entries: Matrix,
    nullspace_dim: usize,
}

impl PenaltyMatrix {
    pub fn new(entries: Matrix, nullspace_dim: usize) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(dim_err("penalty matrix must be square"));
        }
        Ok(Self { entries, nullspace_dim })
    }

    pub fn identity(dim: usize) -> Self {
        Self { entries: Matrix::identity(dim), nullspace_dim: 0 }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn nullspace_dim(&self) -> usize {
        self.nullspace_dim
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.entries.quad_form(v)
    }
}

/// `D^T D` for the `order`-th difference operator on `q` coefficients.
pub fn difference_penalty(q: usize, order: usize) -> Result<PenaltyMatrix> {
    if order < 1 || q <= order {
        return Err(config_err(format!("difference penalty needs q > order >= 1, got q={q}, order={order}")));
    }
    let mut d = Matrix::identity(q);
    for _ in 0..order {
        let r = d.nrows() - 1;
        d = Matrix::from_fn(r, q, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(PenaltyMatrix { entries: d.t_matmul(&d)?, nullspace_dim: order })
}

fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (br, bc) = (b.nrows(), b.ncols());
    Matrix::from_fn(a.nrows() * br, a.ncols() * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Anisotropic Kronecker-sum penalty `la Da (+) lb Db = la (Da (x) I) + lb (I (x) Db)`
/// on `vec(Gamma^T)`, where `Da` acts along the outcome direction (rows of
/// `Gamma`) and `Db` along the feature direction (columns).
///
/// With `la = 0` this is `I (x) (lb Db)`: the feature penalty replicated for
/// every Bernstein coefficient.
pub fn kron_sum_penalty(da: &PenaltyMatrix, la: f64, db: &PenaltyMatrix, lb: f64) -> Result<PenaltyMatrix> {
    if !(la >= 0.0 && lb >= 0.0) {
        return Err(config_err(format!("smoothing parameters must be non-negative, got {la}, {lb}")));
    }
    let (a, b) = (da.dim(), db.dim());
    let left = kron(&da.entries, &Matrix::identity(b)).scale(la);
    let right = kron(&Matrix::identity(a), &db.entries).scale(lb);
    let null_a = if la == 0.0 { a } else { da.nullspace_dim };
    let null_b = if lb == 0.0 { b } else { db.nullspace_dim };
    Ok(PenaltyMatrix { entries: left.add(&right)?, nullspace_dim: null_a * null_b })
}
