use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::mstep::{alpha_quadratic, AlphaCorrelation};
use super::{AlphaPosterior, ComponentData, LmgpParams};
use crate::error::Result;
use crate::kernels::omega_eps_block;
use crate::linalg::{symmetrize, SpdFactor};

/// `M ↦ C M C` with `C = I − J/n`.
pub(crate) fn center_matrix(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    for mut row in m.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
    }
}

pub(crate) fn center_vector(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
}

/// Conditional mean and covariance of the centered effect `Cα` given `w`.
pub fn e_step(data: &ComponentData, params: &LmgpParams) -> Result<AlphaPosterior> {
    params.validate(data)?;
    let n = data.n();
    if !params.variant.has_alpha() || params.sigma2_alpha == 0.0 {
        return Ok(AlphaPosterior::zero(n));
    }
    let sa = params.sigma_alpha(data)?;
    let k = &sa + params.sigma_eps(data);
    let factor = SpdFactor::new(&k)?;
    let r = &data.w - params.mean_vector(data);
    let mut mean = &sa * factor.solve(&r);
    center_vector(&mut mean);
    let half = factor.solve_lower(&sa);
    let mut cov = &sa - half.transpose() * &half;
    center_matrix(&mut cov);
    Ok(AlphaPosterior {
        mean,
        cov: symmetrize(cov),
    })
}

/// Log marginal density of `w` under `N(μ, Σ_α + Σ_ε)`.
pub fn observed_loglik(data: &ComponentData, params: &LmgpParams) -> Result<f64> {
    params.validate(data)?;
    let k = params.sigma_alpha(data)? + params.sigma_eps(data);
    let factor = SpdFactor::new(&k)?;
    let r = &data.w - params.mean_vector(data);
    let n = data.n() as f64;
    Ok(-0.5 * n * (2.0 * PI).ln() - 0.5 * factor.log_det() - 0.5 * r.dot(&factor.solve(&r)))
}

/// Per-category contributions to `Q₁`.
pub fn q1_blocks(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior) -> Result<Vec<f64>> {
    params.validate(data)?;
    data.blocks()
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let e = params.eps_for(k);
            let omega = omega_eps_block(&data.x, b.clone(), &e.kernel);
            let factor = SpdFactor::new(&omega)?;
            let nk = b.len();
            let r = DVector::from_fn(nk, |i, _| data.w[b.start + i] - e.mu - post.mean[b.start + i]);
            let s = post.cov.view((b.start, b.start), (nk, nk)).into_owned();
            let quad = r.dot(&factor.solve(&r)) + factor.trace_solve(&s);
            let nk = nk as f64;
            Ok(-0.5 * nk * (2.0 * PI).ln() - 0.5 * (nk * e.sigma2.ln() + factor.log_det()) - quad / (2.0 * e.sigma2))
        })
        .collect()
}

/// `E[log p(w | α; θ_ε)]` under the posterior of `α`.
pub fn q1(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior) -> Result<f64> {
    Ok(q1_blocks(params, data, post)?.iter().sum())
}

/// `E[log p(α̃; θ_α)]` under the posterior of the centered effect `α̃`.
///
/// The centered effect lives on the zero-sum subspace, so its density is taken
/// there: with `q` an orthonormal basis of the subspace, `qᵀα̃` has covariance
/// `σ²_α qᵀ C Ω_α Cᵀ q`. Zero when the model has no `α` field (GP variant, or
/// `σ²_α = 0`). When the cross kernel is constant `α` is one value per
/// category and the subspace lives in category space.
pub fn q2(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior) -> Result<f64> {
    params.validate(data)?;
    if !params.variant.has_alpha() || params.sigma2_alpha == 0.0 {
        return Ok(0.0);
    }
    let corr = AlphaCorrelation::build(data, &params.alpha)?;
    let Some(proj) = alpha_quadratic(&corr, data, post)? else {
        return Ok(0.0);
    };
    let dim = proj.dim as f64;
    let s2 = params.sigma2_alpha;
    Ok(-0.5 * dim * (2.0 * PI).ln() - 0.5 * (dim * s2.ln() + proj.log_det) - proj.quad / (2.0 * s2))
}
