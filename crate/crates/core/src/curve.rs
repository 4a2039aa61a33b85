//! Monotone quantile curves: empirical quantile points, the I-spline basis,
//! nonnegative spline fits, and inversion back to a CDF.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnls::nnls;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_INTERIOR_KNOTS: usize = 20;

/// Repeated outcome measurements at one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateSample {
    values: Vec<f64>,
}

impl ReplicateSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("replicate sample"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Critical points `(b/m, y_(b))` of the ECDF, read as a discrete quantile function.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalQuantilePoints {
    pub points: Vec<(f64, f64)>,
}

impl EmpiricalQuantilePoints {
    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn ecdf(sample: &ReplicateSample) -> Result<EmpiricalQuantilePoints> {
    ecdf_values(sample.values())
}

/// Same as [`ecdf`] on a raw slice.
pub fn ecdf_values(values: &[f64]) -> Result<EmpiricalQuantilePoints> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let m = sorted.len() as f64;
    Ok(EmpiricalQuantilePoints {
        points: sorted
            .into_iter()
            .enumerate()
            .map(|(b, y)| ((b + 1) as f64 / m, y))
            .collect(),
    })
}

/// I-spline basis on `[0, 1]` with equally spaced interior knots.
///
/// The I-splines are the integrals of the order-`order` M-splines; they are
/// evaluated as tail sums of the B-splines of order `order + 1` on the same
/// knots, which makes every function nondecreasing, 0 at 0 and 1 at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ISplineBasis {
    order: usize,
    interior_knots: Vec<f64>,
    #[serde(skip)]
    knots: Vec<f64>,
}

impl ISplineBasis {
    pub fn new(order: usize, num_interior_knots: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("spline order must be positive"));
        }
        let step = 1.0 / (num_interior_knots + 1) as f64;
        let interior = (1..=num_interior_knots).map(|i| i as f64 * step).collect();
        Self::with_knots(order, interior)
    }

    /// Basis with caller-chosen interior knots (strictly increasing, inside (0,1)).
    pub fn with_knots(order: usize, interior_knots: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("spline order must be positive"));
        }
        let inside = interior_knots.iter().all(|&k| k > 0.0 && k < 1.0);
        let increasing = interior_knots.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(Error::invalid(
                "interior knots must be strictly increasing inside (0, 1)",
            ));
        }
        let mut basis = Self {
            order,
            interior_knots,
            knots: Vec::new(),
        };
        basis.rebuild_knots();
        Ok(basis)
    }

    fn rebuild_knots(&mut self) {
        let reps = self.order + 1;
        let mut knots = vec![0.0; reps];
        knots.extend_from_slice(&self.interior_knots);
        knots.extend(std::iter::repeat_n(1.0, reps));
        self.knots = knots;
    }

    /// Restores derived state after deserialization.
    pub(crate) fn ensure_knots(&mut self) {
        if self.knots.is_empty() {
            self.rebuild_knots();
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Number of I-spline functions, `d − 1`.
    pub fn num_basis(&self) -> usize {
        self.interior_knots.len() + self.order
    }

    /// Length of a coefficient vector including the intercept, `d`.
    pub fn num_coefficients(&self) -> usize {
        self.num_basis() + 1
    }

    /// Knot-interval endpoints `0, k₁, …, 1`; every basis function is a
    /// polynomial of degree `order` between consecutive breakpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend_from_slice(&self.interior_knots);
        v.push(1.0);
        v
    }

    /// All basis values at `p`; constant (0 or 1) outside `[0, 1]`.
    pub fn eval(&self, p: f64) -> Vec<f64> {
        let nb = self.num_basis();
        if p <= 0.0 {
            return vec![0.0; nb];
        }
        if p >= 1.0 {
            return vec![1.0; nb];
        }
        let degree = self.order;
        let span = self.find_span(p);
        let local = self.bspline_nonzero(span, p);
        // B-splines of order `order + 1` are indexed 0..=nb; the nonzero ones are
        // span-degree ..= span. I_i = sum_{j > i} B_j.
        let first = span - degree;
        let mut out = vec![0.0; nb];
        let mut tail = 0.0;
        for j in (0..=nb).rev() {
            if j >= first && j <= span {
                tail += local[j - first];
            }
            if j >= 1 {
                out[j - 1] = if j - 1 < first { 1.0 } else { tail };
            }
        }
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Design matrix with one row per probability.
    pub fn design_matrix(&self, probs: &[f64]) -> DMatrix<f64> {
        let nb = self.num_basis();
        let mut g = DMatrix::zeros(probs.len(), nb);
        for (r, &p) in probs.iter().enumerate() {
            for (c, v) in self.eval(p).into_iter().enumerate() {
                g[(r, c)] = v;
            }
        }
        g
    }

    fn find_span(&self, p: f64) -> usize {
        let degree = self.order;
        let last = self.knots.len() - degree - 2;
        let mut lo = degree;
        let mut hi = last + 1;
        // largest s in [degree, last] with knots[s] <= p
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn bspline_nonzero(&self, span: usize, p: f64) -> Vec<f64> {
        let degree = self.order;
        let t = &self.knots;
        let mut values = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        values[0] = 1.0;
        for j in 1..=degree {
            left[j] = p - t[span + 1 - j];
            right[j] = t[span + j] - p;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        values
    }
}

/// Spline coefficients `(β₀, β₁, …, β_{d−1})` of one smoothed quantile function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub beta: Vec<f64>,
}

impl QuantileFit {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("coefficient vector must include an intercept"));
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite("spline coefficients"));
        }
        if beta[1..].iter().any(|b| *b < 0.0) {
            return Err(Error::invalid("spline coefficients must be nonnegative"));
        }
        Ok(Self { beta })
    }

    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    pub fn spline_coefficients(&self) -> &[f64] {
        &self.beta[1..]
    }

    /// `Q(0)` and `Q(1)`.
    pub fn range(&self) -> (f64, f64) {
        (self.beta[0], self.beta.iter().sum())
    }

    /// `Q(p)` without range checks; `p` outside `[0,1]` is clamped by the basis.
    pub fn value(&self, basis: &ISplineBasis, p: f64) -> f64 {
        let gamma = basis.eval(p);
        self.beta[0]
            + self.beta[1..]
                .iter()
                .zip(&gamma)
                .map(|(b, g)| b * g)
                .sum::<f64>()
    }
}

/// Nonnegative least-squares spline fit to the empirical quantile points.
///
/// The intercept is profiled out by centering, the spline coefficients come from
/// an active-set NNLS on the centered design, and the intercept is recovered
/// from the means.
pub fn fit_quantile(points: &EmpiricalQuantilePoints, basis: &ISplineBasis) -> Result<QuantileFit> {
    if points.is_empty() {
        return Err(Error::EmptySample);
    }
    let nb = basis.num_basis();
    let ys: Vec<f64> = points.values().collect();
    let first = ys[0];
    if ys.len() < 2 || ys.iter().all(|&y| y == first) {
        let mut beta = vec![0.0; nb + 1];
        beta[0] = first;
        return Ok(QuantileFit { beta });
    }
    let probs: Vec<f64> = points.probs().collect();
    let g = basis.design_matrix(&probs);
    let m = ys.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / m;
    let g_mean: Vec<f64> = (0..nb).map(|j| g.column(j).sum() / m).collect();
    let centered = DMatrix::from_fn(ys.len(), nb, |i, j| g[(i, j)] - g_mean[j]);
    let rhs = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - y_mean));
    let coef = nnls(&centered, &rhs);
    let intercept = y_mean - coef.iter().zip(&g_mean).map(|(c, gm)| c * gm).sum::<f64>();
    let mut beta = Vec::with_capacity(nb + 1);
    beta.push(intercept);
    beta.extend(coef.iter().copied());
    Ok(QuantileFit { beta })
}

/// Residual sum of squares of a fit against the points it was fitted to.
pub fn residual_sum_of_squares(
    fit: &QuantileFit,
    basis: &ISplineBasis,
    points: &EmpiricalQuantilePoints,
) -> f64 {
    points
        .points
        .iter()
        .map(|&(p, y)| (y - fit.value(basis, p)).powi(2))
        .sum()
}

pub fn eval_quantile(fit: &QuantileFit, basis: &ISplineBasis, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    if fit.beta.len() != basis.num_coefficients() {
        return Err(Error::dims(format!(
            "fit has {} coefficients, basis expects {}",
            fit.beta.len(),
            basis.num_coefficients()
        )));
    }
    Ok(fit.value(basis, p))
}

/// `F(y) = sup{p : Q(p) ≤ y}` by bisection on `p`.
pub fn cdf_at(fit: &QuantileFit, basis: &ISplineBasis, y: f64) -> f64 {
    let (q0, q1) = fit.range();
    if y < q0 {
        return 0.0;
    }
    if y >= q1 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if fit.value(basis, mid) <= y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    lo
}

pub fn quantile_to_cdf(fit: &QuantileFit, basis: &ISplineBasis, y_grid: &[f64]) -> Vec<(f64, f64)> {
    y_grid.iter().map(|&y| (y, cdf_at(fit, basis, y))).collect()
}
