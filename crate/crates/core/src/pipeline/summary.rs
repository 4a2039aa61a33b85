//! Mean, standard deviation and quantiles read off a quantile function.

use serde::{Deserialize, Serialize};

use crate::curve::{ISplineBasis, QuantileFit};
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Probabilities reported by default.
pub const DEFAULT_PROBS: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    /// `(p, Q(p))` in the order requested.
    pub quantiles: Vec<(f64, f64)>,
}

/// `mean = ∫₀¹ Q`, `sd² = ∫₀¹ Q² − mean²`, plus `Q` at each probability.
///
/// `Q` is a polynomial of degree `order` between knots, so Gauss-Legendre with
/// `order + 1` nodes per knot interval integrates `Q²` exactly.
pub fn summary_stats(fit: &QuantileFit, basis: &ISplineBasis, probs: &[f64]) -> Result<SummaryStats> {
    if fit.beta.len() != basis.num_coefficients() {
        return Err(Error::dims(format!(
            "fit has {} coefficients, basis expects {}",
            fit.beta.len(),
            basis.num_coefficients()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let (nodes, weights) = gauss_legendre(basis.order() + 1);
    let (mut m1, mut m2) = (0.0, 0.0);
    for w in basis.breakpoints().windows(2) {
        let (a, b) = (w[0], w[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (t, wt) in nodes.iter().zip(&weights) {
            let q = fit.value(basis, mid + half * t);
            m1 += half * wt * q;
            m2 += half * wt * q * q;
        }
    }
    let var = (m2 - m1 * m1).max(0.0);
    Ok(SummaryStats {
        mean: m1,
        sd: var.sqrt(),
        quantiles: probs.iter().map(|&p| (p, fit.value(basis, p))).collect(),
    })
}
