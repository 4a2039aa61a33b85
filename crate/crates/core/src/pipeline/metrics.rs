//! Tabulated CDF curves and the EL1 distance between them.

use crate::curve::{ISplineBasis, QuantileFit};
use crate::error::{Error, Result};

/// Default number of uniform points added to the merged EL1 grid.
pub const DEFAULT_EL1_POINTS: usize = 1000;
/// Relative extension of the union of supports on each side.
const SUPPORT_MARGIN: f64 = 0.01;
/// Probability grid used to tabulate a quantile fit as a CDF.
const QUANTILE_TABLE_POINTS: usize = 2001;

/// A CDF stored as a piecewise-linear table of `(y, F)` nodes.
///
/// A repeated `y` encodes a jump: the first node gives the left limit, the last
/// the value. Below the first node `F = 0`, above the last `F = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfCurve {
    nodes: Vec<(f64, f64)>,
}

impl CdfCurve {
    /// Builds a curve from nodes sorted by `y` with nondecreasing `F` in `[0, 1]`.
    pub fn new(nodes: Vec<(f64, f64)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("empty CDF curve"));
        }
        if !nodes.iter().all(|(y, f)| y.is_finite() && f.is_finite()) {
            return Err(Error::NonFinite("CDF curve"));
        }
        let sorted = nodes.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        let bounded = nodes.iter().all(|(_, f)| (0.0..=1.0).contains(f));
        if !sorted || !bounded {
            return Err(Error::invalid("CDF nodes must be sorted, nondecreasing and within [0, 1]"));
        }
        Ok(Self { nodes })
    }

    /// Empirical CDF of a sample.
    pub fn step(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let m = sorted.len() as f64;
        let mut nodes = Vec::with_capacity(2 * sorted.len());
        let mut i = 0;
        while i < sorted.len() {
            let y = sorted[i];
            let mut j = i;
            while j < sorted.len() && sorted[j] == y {
                j += 1;
            }
            nodes.push((y, i as f64 / m));
            nodes.push((y, j as f64 / m));
            i = j;
        }
        Self::new(nodes)
    }

    /// CDF of a point mass.
    pub fn point_mass(y: f64) -> Result<Self> {
        Self::new(vec![(y, 0.0), (y, 1.0)])
    }

    /// The CDF of a smoothed quantile function, tabulated as `(Q(p), p)` on a
    /// fine probability grid that includes every knot.
    pub fn from_quantile(fit: &QuantileFit, basis: &ISplineBasis) -> Result<Self> {
        Self::from_quantile_fn(|p| fit.value(basis, p), &basis.breakpoints())
    }

    /// Tabulates `(Q(p), p)` for a nondecreasing quantile function on a uniform
    /// probability grid plus `extra` probabilities.
    pub fn from_quantile_fn(q: impl Fn(f64) -> f64, extra: &[f64]) -> Result<Self> {
        let n = QUANTILE_TABLE_POINTS;
        let mut probs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        probs.extend(extra.iter().copied().filter(|p| (0.0..=1.0).contains(p)));
        probs.sort_by(|a, b| a.total_cmp(b));
        probs.dedup();
        let mut nodes: Vec<(f64, f64)> = probs.iter().map(|&p| (q(p), p)).collect();
        // floating noise can break monotonicity by an ulp
        for i in 1..nodes.len() {
            if nodes[i].0 < nodes[i - 1].0 {
                nodes[i].0 = nodes[i - 1].0;
            }
        }
        Self::new(nodes)
    }

    /// Tabulates a CDF function on `n` uniform points over `[lo, hi]`; the
    /// value at `lo` is taken as the left limit of the curve.
    pub fn from_cdf_fn(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n < 2 {
            return Err(Error::invalid("CDF table needs hi > lo and at least two points"));
        }
        let mut nodes = Vec::with_capacity(n + 2);
        nodes.push((lo, 0.0));
        let mut last = 0.0f64;
        for i in 0..n {
            let y = if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
            last = f(y).clamp(last, 1.0);
            nodes.push((y, last));
        }
        nodes.push((hi, 1.0));
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    pub fn support(&self) -> (f64, f64) {
        (self.nodes[0].0, self.nodes[self.nodes.len() - 1].0)
    }

    /// `F(y)` (right-continuous).
    pub fn eval(&self, y: f64) -> f64 {
        self.right_limit(y)
    }

    fn right_limit(&self, y: f64) -> f64 {
        // last node with node.y <= y
        let idx = self.nodes.partition_point(|n| n.0 <= y);
        if idx == 0 {
            return 0.0;
        }
        if idx == self.nodes.len() {
            return 1.0;
        }
        let (y0, f0) = self.nodes[idx - 1];
        let (y1, f1) = self.nodes[idx];
        f0 + (f1 - f0) * (y - y0) / (y1 - y0)
    }

    fn left_limit(&self, y: f64) -> f64 {
        // first node with node.y >= y
        let idx = self.nodes.partition_point(|n| n.0 < y);
        if idx == self.nodes.len() {
            return 1.0;
        }
        if idx == 0 {
            return 0.0;
        }
        let (y0, f0) = self.nodes[idx - 1];
        let (y1, f1) = self.nodes[idx];
        f0 + (f1 - f0) * (y - y0) / (y1 - y0)
    }
}

/// `∫ |F(y) − F̂(y)| dy` with [`DEFAULT_EL1_POINTS`] extra grid points.
pub fn el1(f: &CdfCurve, f_hat: &CdfCurve) -> f64 {
    el1_with_points(f, f_hat, DEFAULT_EL1_POINTS)
}

/// EL1 on the merged grid of both curves' nodes plus `points` uniform points
/// over the union of supports extended by 1% at each end.
///
/// Both curves are linear between merged grid points, so each segment is
/// integrated exactly (sign changes inside a segment included).
pub fn el1_with_points(f: &CdfCurve, f_hat: &CdfCurve, points: usize) -> f64 {
    let (a0, a1) = f.support();
    let (b0, b1) = f_hat.support();
    let lo = a0.min(b0);
    let hi = a1.max(b1);
    let pad = SUPPORT_MARGIN * (hi - lo).max(f64::EPSILON * lo.abs().max(1.0));
    let (lo, hi) = (lo - pad, hi + pad);

    let mut grid: Vec<f64> = f.nodes.iter().chain(&f_hat.nodes).map(|n| n.0).collect();
    let points = points.max(2);
    grid.extend((0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64));
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();

    let mut total = 0.0;
    for pair in grid.windows(2) {
        let (y0, y1) = (pair[0], pair[1]);
        let a = f.right_limit(y0) - f_hat.right_limit(y0);
        let b = f.left_limit(y1) - f_hat.left_limit(y1);
        total += (y1 - y0) * segment_abs_mean(a, b);
    }
    total
}

/// Mean of `|ℓ|` over a segment where `ℓ` is linear from `a` to `b`.
fn segment_abs_mean(a: f64, b: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * (a.abs() + b.abs())
    } else {
        0.5 * (a * a + b * b) / (a.abs() + b.abs())
    }
}
