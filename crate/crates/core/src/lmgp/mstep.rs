use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::{AlphaPosterior, ComponentData, LmgpParams};
use crate::error::{Error, Result};
use crate::kernels::{hypersphere_dp, hypersphere_p, phi_matrix, CategoryCorrelationParams, CrossKernel};
use crate::linalg::{frobenius_dot, SpdFactor};

/// Correlation matrix of `α` in the form the estimators need.
#[derive(Clone, Debug)]
pub enum AlphaCorrelation {
    /// An explicit `n × n` matrix with no angle structure attached.
    Dense(DMatrix<f64>),
    /// `Ω_α = ρ(zᵢ, zⱼ) Φᵢⱼ` with its factors kept for differentiation.
    Structured {
        omega: DMatrix<f64>,
        p: DMatrix<f64>,
        phi: DMatrix<f64>,
    },
    /// `κ ≡ 1`: `α` is one value per category with correlation `P`.
    Categorical { p: DMatrix<f64> },
}

impl AlphaCorrelation {
    pub fn build(data: &ComponentData, params: &CategoryCorrelationParams) -> Result<Self> {
        let c = data.num_categories();
        let (p, _) = hypersphere_p(&params.thetas, c)?;
        params.kernel.validate(data.p())?;
        Ok(match params.kernel {
            CrossKernel::Constant => AlphaCorrelation::Categorical { p },
            kernel => {
                let phi = phi_matrix(&data.x, &kernel);
                let omega = expand(&p, &phi, &data.z);
                AlphaCorrelation::Structured { omega, p, phi }
            }
        })
    }

    /// The full `n × n` correlation matrix.
    pub fn matrix(&self, data: &ComponentData) -> DMatrix<f64> {
        match self {
            AlphaCorrelation::Dense(m) => m.clone(),
            AlphaCorrelation::Structured { omega, .. } => omega.clone(),
            AlphaCorrelation::Categorical { p } => {
                DMatrix::from_fn(data.n(), data.n(), |i, j| p[(data.z[i], data.z[j])])
            }
        }
    }

    /// The matrix the `α` likelihood is evaluated with: `Ω_α`, or `P` when
    /// `α` lives on the categories.
    pub fn reduced(&self) -> &DMatrix<f64> {
        match self {
            AlphaCorrelation::Dense(m) => m,
            AlphaCorrelation::Structured { omega, .. } => omega,
            AlphaCorrelation::Categorical { p } => p,
        }
    }
}

fn expand(p: &DMatrix<f64>, phi: &DMatrix<f64>, z: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.len(), z.len(), |i, j| p[(z[i], z[j])] * phi[(i, j)])
}

/// Posterior first and second moments in the space `reduced()` lives in.
pub(crate) fn alpha_moments(
    corr: &AlphaCorrelation,
    data: &ComponentData,
    post: &AlphaPosterior,
) -> (DVector<f64>, DMatrix<f64>) {
    match corr {
        AlphaCorrelation::Categorical { .. } => {
            let blocks = data.blocks();
            let c = blocks.len();
            let m = DVector::from_fn(c, |k, _| post.mean.rows_range(blocks[k].clone()).mean());
            let s = DMatrix::from_fn(c, c, |k, l| {
                let (bk, bl) = (&blocks[k], &blocks[l]);
                post.cov.view((bk.start, bl.start), (bk.len(), bl.len())).mean()
            });
            (m, s)
        }
        _ => (post.mean.clone(), post.cov.clone()),
    }
}

/// The zero-sum subspace that the centered effect occupies.
///
/// For a field over the rows this is `1⊥`. With `q` an orthonormal basis,
/// `|qᵀRq| = |R| 1ᵀR⁻¹1 / n` and `q(qᵀRq)⁻¹qᵀ = R⁻¹ − R⁻¹11ᵀR⁻¹ / 1ᵀR⁻¹1`,
/// so no basis is ever formed. When `α` lives on the categories the subspace
/// is the complement of the category-size vector, handled with an explicit
/// basis: `q` spans it and `bᵀRb` is the covariance of `qᵀα̃` given the
/// uncentered correlation `R`.
#[derive(Clone, Debug)]
pub(crate) enum ZeroSum {
    Rows(usize),
    Categories { q: DMatrix<f64>, b: DMatrix<f64> },
}

/// The `α` likelihood pieces on the subspace.
pub(crate) struct Projected {
    pub log_det: f64,
    /// `tr(R̃⁻¹S̃) + m̃ᵀR̃⁻¹m̃`.
    pub quad: f64,
    pub dim: usize,
    /// `(qR̃⁻¹qᵀ, q(R̃⁻¹m̃m̃ᵀR̃⁻¹ + R̃⁻¹S̃R̃⁻¹)qᵀ)` pulled back to the space of `R`.
    pub pullback: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl Projected {
    /// `∂/∂R` of `−½ log|R̃| − quad/(2σ²)`.
    pub fn sensitivity(&self, sigma2: f64) -> Option<DMatrix<f64>> {
        self.pullback
            .as_ref()
            .map(|(g, outer)| g * -0.5 + outer / (2.0 * sigma2))
    }
}

impl ZeroSum {
    fn categories(sizes: &[usize]) -> Self {
        let c = sizes.len();
        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        let d = DVector::from_iterator(c, sizes.iter().map(|&s| s as f64));
        let mut basis: Vec<DVector<f64>> = vec![d.normalize()];
        for e in 0..c {
            if basis.len() == c {
                break;
            }
            let mut v = DVector::zeros(c);
            v[e] = 1.0;
            for _ in 0..2 {
                for u in &basis {
                    let proj = u.dot(&v);
                    v -= u * proj;
                }
            }
            let norm = v.norm();
            if norm > 1e-8 {
                basis.push(v / norm);
            }
        }
        let q = DMatrix::from_columns(&basis[1..]);
        let col_sums = DMatrix::from_element(1, c, 1.0) * &q;
        let b = &q - &d * col_sums / total;
        ZeroSum::Categories { q, b }
    }

    pub fn for_corr(corr: &AlphaCorrelation, data: &ComponentData) -> Self {
        match corr {
            AlphaCorrelation::Categorical { .. } => Self::categories(&data.category_sizes()),
            _ => ZeroSum::Rows(data.n()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ZeroSum::Rows(n) => n.saturating_sub(1),
            ZeroSum::Categories { q, .. } => q.ncols(),
        }
    }

    /// `m` and `s` are the posterior moments in the space of `r`; for the rows
    /// they must already be centered.
    pub fn evaluate(&self, r: &DMatrix<f64>, m: &DVector<f64>, s: &DMatrix<f64>, want_grad: bool) -> Result<Projected> {
        let dim = self.dim();
        match self {
            ZeroSum::Rows(n) => {
                let factor = SpdFactor::new(r)?;
                let mut g = factor.inverse();
                let u = DVector::from_fn(*n, |i, _| g.row(i).sum());
                let total = u.sum();
                if !(total > 0.0) || !total.is_finite() {
                    return Err(Error::Singular);
                }
                g -= &u * u.transpose() / total;
                let gm = &g * m;
                let quad = m.dot(&gm) + frobenius_dot(&g, s);
                let log_det = factor.log_det() + (total / *n as f64).ln();
                let pullback = want_grad.then(|| {
                    let gs = &g * s;
                    let outer = &gm * gm.transpose() + gs * &g;
                    (g, outer)
                });
                Ok(Projected { log_det, quad, dim, pullback })
            }
            ZeroSum::Categories { q, b } => {
                let mq = q.tr_mul(m);
                let sq = q.tr_mul(s) * q;
                let factor = SpdFactor::new(&(b.tr_mul(r) * b))?;
                let a = factor.solve(&mq);
                let quad = mq.dot(&a) + factor.trace_solve(&sq);
                let pullback = want_grad.then(|| {
                    let inv = factor.inverse();
                    let outer = &a * a.transpose() + &inv * &sq * &inv;
                    (b * inv * b.transpose(), b * outer * b.transpose())
                });
                Ok(Projected {
                    log_det: factor.log_det(),
                    quad,
                    dim,
                    pullback,
                })
            }
        }
    }
}

/// The `α` likelihood on the zero-sum subspace at the correlation `corr`.
pub(crate) fn alpha_quadratic(
    corr: &AlphaCorrelation,
    data: &ComponentData,
    post: &AlphaPosterior,
) -> Result<Option<Projected>> {
    let zs = ZeroSum::for_corr(corr, data);
    if zs.dim() == 0 {
        return Ok(None);
    }
    let (m, s) = alpha_moments(corr, data, post);
    zs.evaluate(corr.reduced(), &m, &s, false).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedForm {
    pub mu: f64,
    pub sigma2_eps: f64,
    pub sigma2_alpha: f64,
}

/// Maximizers of `Q₁` in `(μ, σ²_ε)` and of `Q₂` in `σ²_α` with the
/// correlation matrices held fixed.
pub fn m_step_closed(
    data: &ComponentData,
    post: &AlphaPosterior,
    omega_eps: &DMatrix<f64>,
    omega_alpha: &AlphaCorrelation,
) -> Result<ClosedForm> {
    let n = data.n();
    if omega_eps.shape() != (n, n) || post.mean.len() != n || post.cov.shape() != (n, n) {
        return Err(Error::dims("M-step inputs do not match the data size"));
    }
    let factor = SpdFactor::new(omega_eps)?;
    let ones = DVector::from_element(n, 1.0);
    let inv_ones = factor.solve(&ones);
    let denom = ones.dot(&inv_ones);
    if !(denom.abs() > f64::MIN_POSITIVE) || !denom.is_finite() {
        return Err(Error::invalid("1ᵀΩ_ε⁻¹1 is zero"));
    }
    let centered = &data.w - &post.mean;
    let mu = inv_ones.dot(&centered) / denom;
    let r = centered.add_scalar(-mu);
    let sigma2_eps = (r.dot(&factor.solve(&r)) + factor.trace_solve(&post.cov)) / n as f64;

    let sigma2_alpha = match alpha_quadratic(omega_alpha, data, post)? {
        Some(proj) => proj.quad / proj.dim as f64,
        None => 0.0,
    };
    Ok(ClosedForm {
        mu,
        sigma2_eps,
        sigma2_alpha,
    })
}

/// Everything about one category block the `ε` objective needs.
#[derive(Clone, Debug)]
pub(crate) struct EpsBlock {
    pub range: Range<usize>,
    /// `(x_il − x_jl)²` for each input dimension `l`.
    pub diffs: Vec<DMatrix<f64>>,
    pub w: DVector<f64>,
    pub m: DVector<f64>,
    pub s: DMatrix<f64>,
}

pub(crate) fn eps_blocks(data: &ComponentData, post: &AlphaPosterior) -> Vec<EpsBlock> {
    data.blocks()
        .iter()
        .map(|b| {
            let nk = b.len();
            let diffs = (0..data.p())
                .map(|l| {
                    DMatrix::from_fn(nk, nk, |i, j| {
                        (data.x[(b.start + i, l)] - data.x[(b.start + j, l)]).powi(2)
                    })
                })
                .collect();
            EpsBlock {
                range: b.clone(),
                diffs,
                w: data.w.rows_range(b.clone()).into_owned(),
                m: post.mean.rows_range(b.clone()).into_owned(),
                s: post.cov.view((b.start, b.start), (nk, nk)).into_owned(),
            }
        })
        .collect()
}

pub(crate) fn update_posterior(blocks: &mut [EpsBlock], post: &AlphaPosterior) {
    for b in blocks {
        let nk = b.range.len();
        b.m = post.mean.rows_range(b.range.clone()).into_owned();
        b.s = post.cov.view((b.range.start, b.range.start), (nk, nk)).into_owned();
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EpsEval {
    /// `−½ Σ log|Ω_k| − (n/2) log σ̂²`.
    pub value: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub grad_nu: Vec<f64>,
    pub grad_g: f64,
}

/// `−½ log|Ω| − (n/2) log σ² − quad/(2σ²) + n/2`, which is the profile
/// objective `−½ log|Ω| − (n/2) log σ̂²` whenever `σ² = quad/n`.
fn profile_value(log_det: f64, quad: f64, sigma2: f64, n: usize) -> f64 {
    let n = n as f64;
    -0.5 * log_det - 0.5 * n * sigma2.ln() - quad / (2.0 * sigma2) + 0.5 * n
}

/// Profile objective of a group of blocks sharing `(μ, σ²_ε, ν, g)`.
///
/// `mu = None` profiles `μ` out through its generalized least-squares value.
/// `floor` bounds `σ̂²` away from zero.
pub(crate) fn eval_eps(
    blocks: &[&EpsBlock],
    nu: &[f64],
    g: f64,
    mu: Option<f64>,
    want_grad: bool,
    floor: f64,
) -> Result<EpsEval> {
    let p = nu.len();
    let mut factors = Vec::with_capacity(blocks.len());
    let mut kernels = Vec::with_capacity(blocks.len());
    for b in blocks {
        let nk = b.range.len();
        let mut e = DMatrix::zeros(nk, nk);
        for i in 0..nk {
            for j in 0..i {
                let s: f64 = (0..p).map(|l| b.diffs[l][(i, j)] / nu[l]).sum();
                let v = (-s).exp();
                e[(i, j)] = v;
                e[(j, i)] = v;
            }
            e[(i, i)] = 1.0;
        }
        let mut omega = e.clone();
        for i in 0..nk {
            omega[(i, i)] += g;
        }
        factors.push(SpdFactor::new(&omega)?);
        kernels.push(e);
    }

    let mu = match mu {
        Some(mu) => mu,
        None => {
            let (mut num, mut den) = (0.0, 0.0);
            for (b, f) in blocks.iter().zip(&factors) {
                let inv_ones = f.solve(&DVector::from_element(b.range.len(), 1.0));
                num += inv_ones.dot(&(&b.w - &b.m));
                den += inv_ones.sum();
            }
            if !(den.abs() > f64::MIN_POSITIVE) {
                return Err(Error::invalid("1ᵀΩ_ε⁻¹1 is zero"));
            }
            num / den
        }
    };

    let mut n = 0;
    let mut quad = 0.0;
    let mut log_det = 0.0;
    let mut residual_solves = Vec::with_capacity(blocks.len());
    for (b, f) in blocks.iter().zip(&factors) {
        n += b.range.len();
        let r = (&b.w - &b.m).add_scalar(-mu);
        let a = f.solve(&r);
        quad += r.dot(&a) + f.trace_solve(&b.s);
        log_det += f.log_det();
        residual_solves.push(a);
    }
    let sigma2 = (quad / n as f64).max(floor);
    let value = profile_value(log_det, quad, sigma2, n);

    let mut grad_nu = vec![0.0; p];
    let mut grad_g = 0.0;
    if want_grad {
        for (((b, f), e), a) in blocks.iter().zip(&factors).zip(&kernels).zip(&residual_solves) {
            let inv = f.inverse();
            let outer = a * a.transpose() + &inv * &b.s * &inv;
            let m = inv * -0.5 + outer / (2.0 * sigma2);
            grad_g += m.trace();
            for l in 0..p {
                let weighted = e.component_mul(&b.diffs[l]);
                grad_nu[l] += frobenius_dot(&m, &weighted) / (nu[l] * nu[l]);
            }
        }
    }
    Ok(EpsEval {
        value,
        mu,
        sigma2,
        grad_nu,
        grad_g,
    })
}

/// Data-side ingredients of the `α` profile objective.
#[derive(Clone, Debug)]
pub(crate) struct AlphaProblem {
    c: usize,
    /// `Φ` and the category blocks when `α` is a field over the rows.
    field: Option<(DMatrix<f64>, Vec<Range<usize>>, Vec<usize>)>,
    zero_sum: ZeroSum,
    m: DVector<f64>,
    s: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct AlphaEval {
    /// `−½ log|Ω̃_α| − (dim/2) log σ̂²_α` on the zero-sum subspace.
    pub value: f64,
    pub sigma2: f64,
    pub grad: Vec<f64>,
}

impl AlphaProblem {
    pub fn new(data: &ComponentData, kernel: &CrossKernel, post: &AlphaPosterior) -> Self {
        let c = data.num_categories();
        let (field, zero_sum) = match kernel {
            CrossKernel::Constant => (None, ZeroSum::categories(&data.category_sizes())),
            k => (
                Some((phi_matrix(&data.x, k), data.blocks().to_vec(), data.z.clone())),
                ZeroSum::Rows(data.n()),
            ),
        };
        let mut out = Self {
            c,
            field,
            zero_sum,
            m: DVector::zeros(0),
            s: DMatrix::zeros(0, 0),
        };
        out.set_posterior(data, post);
        out
    }

    pub fn set_posterior(&mut self, data: &ComponentData, post: &AlphaPosterior) {
        let (m, s) = match &self.field {
            None => {
                let p = DMatrix::identity(self.c, self.c);
                alpha_moments(&AlphaCorrelation::Categorical { p }, data, post)
            }
            Some(_) => (post.mean.clone(), post.cov.clone()),
        };
        self.m = m;
        self.s = s;
    }

    pub fn eval(&self, thetas: &[f64], want_grad: bool, floor: f64) -> Result<AlphaEval> {
        let (p, _) = hypersphere_p(thetas, self.c)?;
        let r = match &self.field {
            None => p,
            Some((phi, _, z)) => expand(&p, phi, z),
        };
        let want_grad = want_grad && !thetas.is_empty();
        let proj = self.zero_sum.evaluate(&r, &self.m, &self.s, want_grad)?;
        let dim = proj.dim;
        let sigma2 = (proj.quad / dim as f64).max(floor);
        let value = profile_value(proj.log_det, proj.quad, sigma2, dim);
        let mut grad = Vec::new();
        if let Some(m) = proj.sensitivity(sigma2) {
            let g = match &self.field {
                None => m,
                Some((phi, blocks, _)) => {
                    let weighted = m.component_mul(phi);
                    DMatrix::from_fn(self.c, self.c, |k, l| {
                        let (bk, bl) = (&blocks[k], &blocks[l]);
                        weighted.view((bk.start, bl.start), (bk.len(), bl.len())).sum()
                    })
                }
            };
            grad = hypersphere_dp(thetas, self.c)?
                .iter()
                .map(|dp| frobenius_dot(&g, dp))
                .collect();
        }
        Ok(AlphaEval { value, sigma2, grad })
    }
}

/// Indices of the category blocks that share one `ε` parameter set.
pub(crate) fn eps_groups(params: &LmgpParams, data: &ComponentData) -> Vec<Vec<usize>> {
    let c = data.num_categories();
    if params.eps.len() == 1 {
        vec![(0..c).collect()]
    } else {
        (0..c).map(|k| vec![k]).collect()
    }
}

/// Profile objectives at the current length-scales, nuggets and angles, with
/// `μ` held at its value in `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileValues {
    /// One value per `ε` parameter set.
    pub eps: Vec<f64>,
    /// `None` for models without an `α` field.
    pub alpha: Option<f64>,
}

/// Gradients of [`ProfileValues`] with respect to `ν`, `g` and the angles.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileGradients {
    pub nu: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub thetas: Vec<f64>,
}

fn profile(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior, want_grad: bool) -> Result<(ProfileValues, ProfileGradients)> {
    params.validate(data)?;
    let blocks = eps_blocks(data, post);
    let mut values = ProfileValues {
        eps: Vec::new(),
        alpha: None,
    };
    let mut grads = ProfileGradients {
        nu: Vec::new(),
        g: Vec::new(),
        thetas: Vec::new(),
    };
    for (gi, group) in eps_groups(params, data).iter().enumerate() {
        let e = &params.eps[gi];
        let members: Vec<&EpsBlock> = group.iter().map(|&k| &blocks[k]).collect();
        let ev = eval_eps(&members, &e.kernel.nu, e.kernel.g, Some(e.mu), want_grad, 0.0)?;
        values.eps.push(ev.value);
        grads.nu.push(ev.grad_nu);
        grads.g.push(ev.grad_g);
    }
    if params.variant.has_alpha() {
        let problem = AlphaProblem::new(data, &params.alpha.kernel, post);
        let ev = problem.eval(&params.alpha.thetas, want_grad, 0.0)?;
        values.alpha = Some(ev.value);
        grads.thetas = ev.grad;
    }
    Ok((values, grads))
}

pub fn profile_values(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior) -> Result<ProfileValues> {
    Ok(profile(params, data, post, false)?.0)
}

pub fn profile_gradients(params: &LmgpParams, data: &ComponentData, post: &AlphaPosterior) -> Result<ProfileGradients> {
    Ok(profile(params, data, post, true)?.1)
}
