use nalgebra::{DMatrix, DVector};

use super::{ComponentData, LmgpParams};
use crate::error::{Error, Result};
use crate::kernels::{euclidean, hypersphere_p, row, sq_distance_scaled};
use crate::linalg::SpdFactor;

/// Conditional-mean predictor with `Σ₁₁⁻¹ (w − μ)` solved once.
#[derive(Clone, Debug)]
pub struct ComponentPredictor {
    params: LmgpParams,
    rows: Vec<Vec<f64>>,
    z: Vec<usize>,
    p_corr: DMatrix<f64>,
    weights: DVector<f64>,
}

impl ComponentPredictor {
    pub fn new(data: &ComponentData, params: &LmgpParams) -> Result<Self> {
        params.validate(data)?;
        let k = params.sigma_alpha(data)? + params.sigma_eps(data);
        let factor = SpdFactor::new(&k)?;
        let r = &data.w - params.mean_vector(data);
        let weights = factor.solve(&r);
        let c = data.num_categories();
        let p_corr = if params.variant.has_alpha() {
            hypersphere_p(&params.alpha.thetas, c)?.0
        } else {
            DMatrix::identity(c, c)
        };
        Ok(Self {
            params: params.clone(),
            rows: (0..data.n()).map(|i| row(&data.x, i)).collect(),
            z: data.z.clone(),
            p_corr,
            weights,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.p_corr.nrows()
    }

    /// `Cov(w₀, w)` for a new point.
    pub fn cross_covariance(&self, x0: &[f64], z0: usize) -> Result<DVector<f64>> {
        if z0 >= self.num_categories() {
            return Err(Error::UnknownCategory(format!("index {z0}")));
        }
        let p = self.rows.first().map_or(0, |r| r.len());
        if x0.len() != p {
            return Err(Error::dims(format!("expected {p} numeric inputs, got {}", x0.len())));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prediction input"));
        }
        let eps = self.params.eps_for(z0);
        let alpha_on = self.params.variant.has_alpha() && self.params.sigma2_alpha > 0.0;
        Ok(DVector::from_fn(self.rows.len(), |i, _| {
            let mut v = 0.0;
            if alpha_on {
                let kappa = self.params.alpha.kernel.eval(euclidean(x0, &self.rows[i]));
                v += self.params.sigma2_alpha * self.p_corr[(z0, self.z[i])] * kappa;
            }
            if self.z[i] == z0 {
                v += eps.sigma2 * (-sq_distance_scaled(x0, &self.rows[i], &eps.kernel.nu)).exp();
            }
            v
        }))
    }

    /// `ŵ₀ = μ_{k(z₀)} + Σ₀₁ Σ₁₁⁻¹ (w − μ)`.
    pub fn predict(&self, x0: &[f64], z0: usize) -> Result<f64> {
        let cross = self.cross_covariance(x0, z0)?;
        Ok(self.params.eps_for(z0).mu + cross.dot(&self.weights))
    }
}

pub fn predict_w(x0: &[f64], z0: usize, data: &ComponentData, params: &LmgpParams) -> Result<f64> {
    ComponentPredictor::new(data, params)?.predict(x0, z0)
}
