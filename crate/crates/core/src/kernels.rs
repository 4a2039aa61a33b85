//! Correlation structures: the squared-exponential within-category kernel, the
//! compactly supported cross-category kernel, and the hypersphere
//! parameterization of the category correlation matrix.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::median;

/// Length-scales `ν` and nugget `g` of the squared-exponential kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericKernelParams {
    pub nu: Vec<f64>,
    pub g: f64,
}

impl NumericKernelParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.nu.len() != p {
            return Err(Error::dims(format!(
                "{} length-scales for {p} numeric inputs",
                self.nu.len()
            )));
        }
        if self.nu.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("length-scales must be positive"));
        }
        if !(self.g >= 0.0) || !self.g.is_finite() {
            return Err(Error::invalid("nugget must be nonnegative"));
        }
        Ok(())
    }
}

/// Cross-category distance kernel `κ(r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CrossKernel {
    /// `(1 − r/r_max)₊^v`.
    Wendland { r_max: f64, v: f64 },
    /// `κ ≡ 1`: no distance threshold (categorical GP).
    Constant,
}

impl CrossKernel {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            CrossKernel::Wendland { r_max, v } => wendland_unchecked(r, r_max, v),
            CrossKernel::Constant => 1.0,
        }
    }

    /// Smallest exponent for which the truncated-power kernel is positive
    /// definite in `p` dimensions.
    pub fn min_exponent(p: usize) -> f64 {
        (p / 2 + 1) as f64
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let CrossKernel::Wendland { r_max, v } = *self {
            if !(r_max > 0.0) {
                return Err(Error::invalid("r_max must be positive"));
            }
            if !(v >= Self::min_exponent(p)) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "compact-support exponent {v} below {} required for p = {p}",
                    Self::min_exponent(p)
                )));
            }
        }
        Ok(())
    }

    /// Wendland kernel with the minimal valid exponent and `r_max` set to the
    /// median pairwise distance of the rows of `x`.
    pub fn default_for(x: &DMatrix<f64>) -> Self {
        CrossKernel::Wendland {
            r_max: default_r_max(x),
            v: Self::min_exponent(x.ncols()),
        }
    }
}

/// Hypersphere angles of the category correlation matrix plus the distance kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCorrelationParams {
    pub thetas: Vec<f64>,
    pub kernel: CrossKernel,
}

pub fn num_angles(c: usize) -> usize {
    c * c.saturating_sub(1) / 2
}

/// Index of `θ_{ks}` (0-based row `k ≥ 1`, column `s < k`) in the flat angle list.
pub fn angle_index(k: usize, s: usize) -> usize {
    k * (k - 1) / 2 + s
}

pub fn sq_distance_scaled(x1: &[f64], x2: &[f64], nu: &[f64]) -> f64 {
    x1.iter()
        .zip(x2)
        .zip(nu)
        .map(|((a, b), n)| (a - b) * (a - b) / n)
        .sum()
}

pub fn euclidean(x1: &[f64], x2: &[f64]) -> f64 {
    x1.iter()
        .zip(x2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `exp[−Σₗ (x₁ₗ − x₂ₗ)²/νₗ] + g·δ`.
pub fn gauss_corr(x1: &[f64], x2: &[f64], params: &NumericKernelParams, same_index: bool) -> Result<f64> {
    if x1.len() != x2.len() || x1.len() != params.nu.len() {
        return Err(Error::dims(format!(
            "points of length {} and {} with {} length-scales",
            x1.len(),
            x2.len(),
            params.nu.len()
        )));
    }
    let base = (-sq_distance_scaled(x1, x2, &params.nu)).exp();
    Ok(if same_index { base + params.g } else { base })
}

pub fn wendland(r: f64, r_max: f64, v: f64) -> Result<f64> {
    if !(r_max > 0.0) {
        return Err(Error::invalid("r_max must be positive"));
    }
    if !(r >= 0.0) {
        return Err(Error::invalid("distance must be nonnegative"));
    }
    Ok(wendland_unchecked(r, r_max, v))
}

fn wendland_unchecked(r: f64, r_max: f64, v: f64) -> f64 {
    if r >= r_max {
        0.0
    } else {
        let base = 1.0 - r / r_max;
        if v.fract() == 0.0 && v.abs() < 64.0 {
            base.powi(v as i32)
        } else {
            base.powf(v)
        }
    }
}

pub(crate) fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Checks that labels are grouped in nondecreasing order and returns block sizes.
pub fn category_blocks(z: &[usize]) -> Result<Vec<std::ops::Range<usize>>> {
    if z.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Unsorted);
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=z.len() {
        if i == z.len() || z[i] != z[start] {
            blocks.push(start..i);
            start = i;
        }
    }
    Ok(blocks)
}

/// Within-category correlation block for rows `range` of `x`.
pub fn omega_eps_block(x: &DMatrix<f64>, range: std::ops::Range<usize>, params: &NumericKernelParams) -> DMatrix<f64> {
    let n = range.len();
    let rows: Vec<Vec<f64>> = range.map(|i| row(x, i)).collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 + params.g;
        for j in 0..i {
            let v = (-sq_distance_scaled(&rows[i], &rows[j], &params.nu)).exp();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Block-diagonal `Ω_ε`; zero between different categories.
pub fn build_omega_eps(x: &DMatrix<f64>, z: &[usize], params: &NumericKernelParams) -> Result<DMatrix<f64>> {
    if x.nrows() != z.len() {
        return Err(Error::dims("X rows and category labels differ in length"));
    }
    params.validate(x.ncols())?;
    let blocks = category_blocks(z)?;
    let n = z.len();
    let mut m = DMatrix::zeros(n, n);
    for b in blocks {
        let start = b.start;
        let len = b.len();
        let block = omega_eps_block(x, b, params);
        m.view_mut((start, start), (len, len)).copy_from(&block);
    }
    Ok(m)
}

/// Lower-triangular `L` with unit-norm rows and `P = L Lᵀ`.
pub fn hypersphere_p(thetas: &[f64], c: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if c == 0 {
        return Err(Error::invalid("at least one category is required"));
    }
    if thetas.len() != num_angles(c) {
        return Err(Error::dims(format!(
            "{} angles for {c} categories (expected {})",
            thetas.len(),
            num_angles(c)
        )));
    }
    if thetas.iter().any(|t| !(*t > 0.0 && *t < PI)) {
        return Err(Error::invalid("hypersphere angles must lie in (0, π)"));
    }
    let l = hypersphere_l(thetas, c);
    let p = &l * l.transpose();
    Ok((p, l))
}

fn hypersphere_l(thetas: &[f64], c: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(c, c);
    l[(0, 0)] = 1.0;
    for k in 1..c {
        let mut sin_prod = 1.0;
        for s in 0..k {
            let t = thetas[angle_index(k, s)];
            l[(k, s)] = sin_prod * t.cos();
            sin_prod *= t.sin();
        }
        l[(k, k)] = sin_prod;
    }
    l
}

/// `∂P/∂θ` for every angle, in the flat angle order.
pub fn hypersphere_dp(thetas: &[f64], c: usize) -> Result<Vec<DMatrix<f64>>> {
    let (_, l) = hypersphere_p(thetas, c)?;
    let mut out = Vec::with_capacity(thetas.len());
    for k in 1..c {
        for s in 0..k {
            let t = thetas[angle_index(k, s)];
            // only row k of L depends on θ_{ks}
            let mut dl_row = vec![0.0; c];
            let prefix: f64 = (0..s).map(|j| thetas[angle_index(k, j)].sin()).product();
            dl_row[s] = -prefix * t.sin();
            let cot = t.cos() / t.sin();
            for (col, entry) in dl_row.iter_mut().enumerate().take(k + 1).skip(s + 1) {
                *entry = l[(k, col)] * cot;
            }
            let mut dl = DMatrix::zeros(c, c);
            for (col, v) in dl_row.iter().enumerate() {
                dl[(k, col)] = *v;
            }
            let prod = &dl * l.transpose();
            out.push(&prod + prod.transpose());
        }
    }
    Ok(out)
}

/// `Φᵢᵢ′ = κ(‖xᵢ − xᵢ′‖)`.
pub fn phi_matrix(x: &DMatrix<f64>, kernel: &CrossKernel) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut phi = DMatrix::zeros(n, n);
    for i in 0..n {
        phi[(i, i)] = kernel.eval(0.0);
        for j in 0..i {
            let v = kernel.eval(euclidean(&rows[i], &rows[j]));
            phi[(i, j)] = v;
            phi[(j, i)] = v;
        }
    }
    phi
}

fn check_alpha_inputs(x: &DMatrix<f64>, z: &[usize], params: &CategoryCorrelationParams) -> Result<usize> {
    if x.nrows() != z.len() {
        return Err(Error::dims("X rows and category labels differ in length"));
    }
    category_blocks(z)?;
    params.kernel.validate(x.ncols())?;
    Ok(z.iter().max().map_or(1, |m| m + 1))
}

/// `Corr(αᵢ, αᵢ′) = ρ(zᵢ, zᵢ′) κ(rᵢᵢ′)`, evaluated entrywise.
pub fn build_omega_alpha(x: &DMatrix<f64>, z: &[usize], params: &CategoryCorrelationParams) -> Result<DMatrix<f64>> {
    let c = check_alpha_inputs(x, z, params)?;
    let (p, _) = hypersphere_p(&params.thetas, c)?;
    let phi = phi_matrix(x, &params.kernel);
    Ok(DMatrix::from_fn(z.len(), z.len(), |i, j| p[(z[i], z[j])] * phi[(i, j)]))
}

/// The same matrix through the selection form `Aᵀ (P ⊗ Φ) A`, where `A` is the
/// `cn × n` matrix picking entry `(zᵢ, i)` of the Kronecker index space.
pub fn build_omega_alpha_kronecker(
    x: &DMatrix<f64>,
    z: &[usize],
    params: &CategoryCorrelationParams,
) -> Result<DMatrix<f64>> {
    let c = check_alpha_inputs(x, z, params)?;
    let n = z.len();
    let (p, _) = hypersphere_p(&params.thetas, c)?;
    let phi = phi_matrix(x, &params.kernel);
    let kron = p.kronecker(&phi);
    let mut a = DMatrix::zeros(c * n, n);
    for (i, &k) in z.iter().enumerate() {
        a[(k * n + i, i)] = 1.0;
    }
    Ok(a.transpose() * kron * a)
}

/// Median pairwise Euclidean distance between rows (1 when undefined).
pub fn default_r_max(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let r = euclidean(&rows[i], &rows[j]);
            if r > 0.0 {
                d.push(r);
            }
        }
    }
    median(&mut d).unwrap_or(1.0)
}

/// Per-dimension median pairwise squared distance (used as length-scale start).
pub fn median_sq_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    (0..x.ncols())
        .map(|l| {
            let mut d = Vec::new();
            for i in 0..n {
                for j in 0..i {
                    let v = (x[(i, l)] - x[(j, l)]).powi(2);
                    if v > 0.0 {
                        d.push(v);
                    }
                }
            }
            median(&mut d).unwrap_or(1.0)
        })
        .collect()
}
