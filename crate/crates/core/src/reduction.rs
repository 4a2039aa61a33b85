//! SVD decorrelation of the spline coefficient matrix and the map from
//! predicted scores back to monotone spline coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::QuantileFit;
use crate::error::{Error, Result};

/// Number of retained components used when no threshold is requested.
pub const DEFAULT_COMPONENTS: usize = 12;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// `B = U Λ Vᵀ` with scores `W = B V`.
///
/// `u` is thin (`n × min(n, d)`); `v` is always a full `d × d` orthonormal
/// matrix, completed with an orthonormal complement when `n < d`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl SvdFactors {
    /// Rank-`dprime` reconstruction `W_{d′} V_{d′}ᵀ`.
    pub fn approximation(&self, dprime: usize) -> DMatrix<f64> {
        let k = dprime.min(self.v.ncols());
        self.w.columns(0, k) * self.v.columns(0, k).transpose()
    }
}

pub fn decompose(b: &DMatrix<f64>) -> Result<SvdFactors> {
    let (n, d) = b.shape();
    if n == 0 || d == 0 {
        return Err(Error::invalid("coefficient matrix must be nonempty"));
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("coefficient matrix"));
    }
    let svd = b.clone().svd(true, true);
    let u_raw = svd.u.expect("requested U");
    let vt_raw = svd.v_t.expect("requested V^T");
    let r = svd.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut u = DMatrix::zeros(n, r);
    let mut v = DMatrix::zeros(d, d);
    let mut lambda = vec![0.0; d];
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &vt_raw.row(src).transpose());
        lambda[dst] = svd.singular_values[src];
    }
    if r < d {
        complete_orthonormal(&mut v, r);
    }
    let w = b * &v;
    Ok(SvdFactors { u, lambda, v, w })
}

/// Fills columns `filled..d` of `v` with an orthonormal complement of the first ones.
fn complete_orthonormal(v: &mut DMatrix<f64>, filled: usize) {
    let d = v.nrows();
    let mut next = filled;
    for e in 0..d {
        if next == d {
            break;
        }
        let mut cand = DVector::zeros(d);
        cand[e] = 1.0;
        for _ in 0..2 {
            for c in 0..next {
                let col = v.column(c).into_owned();
                let proj = col.dot(&cand);
                cand -= col * proj;
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            v.set_column(next, &(cand / norm));
            next += 1;
        }
    }
}

/// How many SVD components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ComponentSelection {
    Fixed(usize),
    Threshold(f64),
}

impl Default for ComponentSelection {
    fn default() -> Self {
        ComponentSelection::Fixed(DEFAULT_COMPONENTS)
    }
}

impl ComponentSelection {
    /// Resolves to a component count in `1..=d`.
    pub fn resolve(&self, lambda: &[f64]) -> Result<usize> {
        match *self {
            ComponentSelection::Fixed(k) => {
                if k == 0 {
                    return Err(Error::invalid("at least one SVD component is required"));
                }
                Ok(k.min(lambda.len()))
            }
            ComponentSelection::Threshold(t) => select_components(lambda, t),
        }
    }
}

/// Smallest `d′` whose leading singular values cover `threshold` of the total.
pub fn select_components(lambda: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    if lambda.iter().any(|l| *l < 0.0 || !l.is_finite()) {
        return Err(Error::invalid("singular values must be finite and nonnegative"));
    }
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("all singular values are zero"));
    }
    let mut acc = 0.0;
    for (j, l) in lambda.iter().enumerate() {
        acc += l;
        if acc / total >= threshold - 1e-12 {
            return Ok(j + 1);
        }
    }
    Ok(lambda.len())
}

/// Which coefficients are clipped at zero after mapping scores back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truncation {
    /// Spline coefficients only; the intercept stays unconstrained.
    #[default]
    SplineOnly,
    /// Every coefficient, intercept included.
    All,
}

/// `β̂₀ = V_{d′} ŵ₀` followed by truncation of negative entries.
pub fn reconstruct_beta(
    w0: &[f64],
    v: &DMatrix<f64>,
    dprime: usize,
    truncation: Truncation,
) -> Result<QuantileFit> {
    let d = v.nrows();
    if v.ncols() < dprime || dprime > d {
        return Err(Error::dims(format!("d′ = {dprime} exceeds d = {d}")));
    }
    if w0.len() != dprime {
        return Err(Error::dims(format!(
            "score vector has length {}, expected {dprime}",
            w0.len()
        )));
    }
    let scores = DVector::from_column_slice(w0);
    let beta = v.columns(0, dprime) * scores;
    let start = match truncation {
        Truncation::SplineOnly => 1,
        Truncation::All => 0,
    };
    let beta: Vec<f64> = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| if j >= start && b < 0.0 { 0.0 } else { b })
        .collect();
    QuantileFit::new(beta)
}
