//! Dense symmetric positive-definite helpers shared by the kernel and model code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// When the plain factorization fails, a diagonal jitter of `1e-10` (relative to
/// the mean diagonal) is added and grown tenfold up to `1e-6`; beyond that the
/// matrix is reported as singular.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("covariance matrix"));
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = m.nrows();
        let scale = if n == 0 {
            1.0
        } else {
            (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE)
        };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let mut jittered = m.clone();
            for i in 0..n {
                jittered[(i, i)] += rel * scale;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(Self {
                    chol,
                    jitter: rel * scale,
                });
            }
            rel *= 10.0;
        }
        Err(Error::Singular)
    }

    /// Absolute jitter that had to be added to the diagonal (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.lower_inverse();
        x.transpose() * (&x * b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let x = self.lower_inverse();
        symmetrize(x.transpose() * &x)
    }

    /// `tr(M⁻¹ b)`.
    pub fn trace_solve(&self, b: &DMatrix<f64>) -> f64 {
        let x = self.lower_inverse();
        frobenius_dot(&(&x * b), &x)
    }

    /// `L⁻¹ b` for the lower factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower_inverse() * b
    }

    /// `L⁻¹`, by column-oriented forward substitution on the identity. The
    /// general-purpose routines do not exploit the triangular right-hand side
    /// and run much slower than a matrix product.
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut x = DMatrix::zeros(n, n);
        for j in 0..n {
            x[(j, j)] = 1.0;
            for k in j..n {
                let v = x[(k, j)] / l[(k, k)];
                x[(k, j)] = v;
                if v != 0.0 {
                    let lk = l.column(k);
                    let mut xj = x.column_mut(j);
                    for i in (k + 1)..n {
                        xj[i] -= lk[i] * v;
                    }
                }
            }
        }
        x
    }
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Frobenius inner product `Σᵢⱼ aᵢⱼ bᵢⱼ`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m.clone())
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
