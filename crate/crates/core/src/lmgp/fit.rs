use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::estep::{e_step, observed_loglik, q1, q2};
use super::mstep::{eps_blocks, eps_groups, eval_eps, update_posterior, AlphaProblem, EpsBlock};
use super::{AlphaPosterior, ComponentData, EpsParams, LmgpParams, Variant};
use crate::error::{Error, Result};
use crate::kernels::{median_sq_distances, num_angles, CategoryCorrelationParams, CrossKernel, NumericKernelParams};
use crate::optim::{minimize, Bounds, LbfgsbConfig};

const START_NUGGET: f64 = 1e-3;
/// Length-scale search range, as a factor either side of the median squared distance.
const NU_RANGE: f64 = 1e4;
/// Angles are optimized as `θ = π / (1 + e^{−u})` with `|u| ≤ ANGLE_BOUND`.
const ANGLE_BOUND: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NuggetMode {
    Estimate { min: f64, max: f64 },
    Fixed(f64),
}

impl Default for NuggetMode {
    fn default() -> Self {
        NuggetMode::Estimate { min: 1e-8, max: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change of the observed-data log-likelihood between iterations
    /// that counts as converged.
    pub tol: f64,
    /// Inner optimizer settings; `inner.max_iter` caps the steps per M-step.
    pub inner: LbfgsbConfig,
    pub nugget: NuggetMode,
    /// Cross-category distance kernel for LMGP and LMGP-S (CGP always uses
    /// `κ ≡ 1`). `None` picks the compact-support default for the inputs.
    pub cross_kernel: Option<CrossKernel>,
    /// Starting points; EM runs from each and the run with the highest
    /// observed-data log-likelihood is kept.
    pub starts: Vec<Start>,
    /// Extrapolate between pairs of EM steps (SQUAREM). An extrapolated
    /// iterate is accepted only if it does not lower the observed
    /// log-likelihood; plain steps carry no such guarantee here, because the
    /// E-step conditions on the uncentered effect while `Q₂` scores the
    /// centered one.
    pub accelerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Start {
    /// [`initial_params`].
    Default,
    /// `ε` parameters from a per-category GP fit, `α` as in [`initial_params`]
    /// with `σ²_α` set to half the mean fitted `σ²_ε`.
    GpWarm,
    Given(LmgpParams),
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            inner: LbfgsbConfig::default(),
            nugget: NuggetMode::default(),
            cross_kernel: None,
            starts: vec![Start::Default, Start::GpWarm],
            accelerate: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmIteration {
    /// `Q₁ + Q₂` at the iteration's starting parameters and fresh posterior.
    pub q_start: f64,
    /// The same posterior with the M-step parameters.
    pub q_end: f64,
    /// Observed-data log-likelihood after the M-step.
    pub loglik: f64,
    /// Whether the step started from an extrapolated point.
    pub extrapolated: bool,
    /// `Σᵢ μ_{α|w,i}` and `‖μ_{α|w}‖₁` of the iteration's E-step.
    pub posterior_sum: f64,
    pub posterior_l1: f64,
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: LmgpParams,
    /// Observed-data log-likelihood at `params`.
    pub loglik: f64,
    pub trace: Vec<EmIteration>,
    pub converged: bool,
    pub iterations: usize,
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    values.sum::<f64>() / n
}

/// Default starting point: median squared distances for `ν`, a small nugget,
/// `P = I`, sample mean for `μ` and half the sample variance for each of
/// `σ²_ε` and `σ²_α`.
pub fn initial_params(data: &ComponentData, variant: Variant, config: &EmConfig) -> LmgpParams {
    let nu = median_sq_distances(&data.x);
    let g = match config.nugget {
        NuggetMode::Fixed(g) => g,
        NuggetMode::Estimate { min, max } => START_NUGGET.clamp(min, max),
    };
    let total_var = variance(data.w.iter().copied());
    let fallback = if total_var > 0.0 { total_var } else { 1.0 };
    let make = |w: &[f64]| {
        let v = variance(w.iter().copied());
        EpsParams {
            mu: mean(w.iter().copied()),
            sigma2: if v > 0.0 { v / 2.0 } else { fallback / 2.0 },
            kernel: NumericKernelParams { nu: nu.clone(), g },
        }
    };
    let eps = if variant.per_category_eps() {
        data.blocks()
            .iter()
            .map(|b| make(&data.w.as_slice()[b.clone()]))
            .collect()
    } else {
        vec![make(data.w.as_slice())]
    };
    let kernel = match variant {
        Variant::Cgp | Variant::Gp => CrossKernel::Constant,
        _ => config.cross_kernel.unwrap_or_else(|| CrossKernel::default_for(&data.x)),
    };
    LmgpParams {
        variant,
        eps,
        sigma2_alpha: if variant.has_alpha() { fallback / 2.0 } else { 0.0 },
        alpha: CategoryCorrelationParams {
            thetas: vec![PI / 2.0; num_angles(data.num_categories())],
            kernel,
        },
    }
}

/// Fits one score column by EM.
///
/// The GP variant has no latent field, so a single M-step is the maximum
/// likelihood fit. For the other variants the `σ²_α = 0` boundary is fitted as
/// well and kept when its likelihood beats every EM run. With a single category the `α` field cannot be told apart
/// from `ε` and the model is fitted as a GP (`σ²_α = 0`).
pub fn fit_em(data: &ComponentData, variant: Variant, config: &EmConfig) -> Result<EmFit> {
    if data.n() < 2 {
        return Err(Error::invalid("at least two training rows are required"));
    }
    let sizes_ok = data.category_sizes().iter().all(|&s| s >= 2);
    if variant.per_category_eps() && !sizes_ok {
        let (k, size) = data
            .category_sizes()
            .into_iter()
            .enumerate()
            .find(|(_, s)| *s < 2)
            .expect("some category is too small");
        return Err(Error::invalid(format!(
            "category {k} has {size} training row(s); per-category parameters need at least 2"
        )));
    }
    if config.starts.is_empty() {
        return Err(Error::invalid("at least one EM starting point is required"));
    }

    let total_var = variance(data.w.iter().copied());
    let scale = if total_var > 0.0 {
        total_var
    } else {
        mean(data.w.iter().map(|v| v * v)).max(1.0)
    };
    let floor = 1e-12 * scale;
    let alpha_active = variant.has_alpha() && data.num_categories() >= 2;

    if total_var <= 1e-24 * scale {
        // constant column: nothing to model beyond the mean
        let mut params = initial_params(data, variant, config);
        for e in &mut params.eps {
            e.mu = data.w[0];
            e.sigma2 = floor;
        }
        params.sigma2_alpha = 0.0;
        let loglik = observed_loglik(data, &params)?;
        return Ok(EmFit {
            params,
            loglik,
            trace: Vec::new(),
            converged: true,
            iterations: 0,
        });
    }

    let mut best: Option<EmFit> = None;
    for start in &config.starts {
        let params = match start {
            Start::Default => initial_params(data, variant, config),
            Start::Given(p) => {
                if p.variant != variant {
                    return Err(Error::invalid("starting parameters belong to a different variant"));
                }
                p.clone()
            }
            Start::GpWarm => {
                // nothing to warm up without a latent field or with tiny categories
                if !alpha_active || !sizes_ok {
                    if config.starts.contains(&Start::Default) {
                        continue;
                    }
                    initial_params(data, variant, config)
                } else {
                    let gp = run_em(data, initial_params(data, Variant::Gp, config), false, config, floor)?;
                    warm_start(data, variant, config, &gp.params)
                }
            }
        };
        let fit = run_em(data, params, alpha_active, config, floor)?;
        if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
            best = Some(fit);
        }
    }
    let mut best = best.ok_or_else(|| Error::invalid("no usable EM starting point"))?;
    if alpha_active {
        // EM only creeps towards σ²_α = 0, so the boundary is checked directly
        let edge = run_em(data, initial_params(data, variant, config), false, config, floor)?;
        if edge.loglik > best.loglik {
            best = edge;
        }
    }
    Ok(best)
}

fn warm_start(data: &ComponentData, variant: Variant, config: &EmConfig, gp: &LmgpParams) -> LmgpParams {
    let mut params = initial_params(data, variant, config);
    let mean_sigma2 = mean(gp.eps.iter().map(|e| e.sigma2));
    if variant.per_category_eps() {
        params.eps = gp.eps.clone();
    } else {
        let sizes = data.category_sizes();
        let n = data.n() as f64;
        let geo = |f: &dyn Fn(&EpsParams) -> f64| mean(gp.eps.iter().map(|e| f(e).ln())).exp();
        params.eps = vec![EpsParams {
            mu: gp.eps.iter().zip(&sizes).map(|(e, &s)| e.mu * s as f64).sum::<f64>() / n,
            sigma2: mean_sigma2,
            kernel: NumericKernelParams {
                nu: (0..data.p()).map(|l| geo(&|e| e.kernel.nu[l])).collect(),
                g: match config.nugget {
                    NuggetMode::Fixed(g) => g,
                    NuggetMode::Estimate { .. } => geo(&|e| e.kernel.g),
                },
            },
        }];
    }
    params.sigma2_alpha = 0.5 * mean_sigma2;
    params
}

/// E-step and M-step machinery for one run.
struct Stepper<'a> {
    data: &'a ComponentData,
    config: &'a EmConfig,
    floor: f64,
    alpha_active: bool,
    nu_ref: Vec<f64>,
    blocks: Vec<EpsBlock>,
    alpha_problem: Option<AlphaProblem>,
}

impl Stepper<'_> {
    /// One EM iteration from `params`, updated in place.
    fn step(&mut self, params: &mut LmgpParams) -> Result<(EmIteration, bool)> {
        let post = if self.alpha_active {
            e_step(self.data, params)?
        } else {
            AlphaPosterior::zero(self.data.n())
        };
        update_posterior(&mut self.blocks, &post);
        if let Some(problem) = self.alpha_problem.as_mut() {
            problem.set_posterior(self.data, &post);
        }
        let q_start = q1(params, self.data, &post)? + q2(params, self.data, &post)?;
        let inner_ok = m_step(
            params,
            self.data,
            &self.blocks,
            self.alpha_problem.as_ref(),
            self.config,
            &self.nu_ref,
            self.floor,
        )?;
        let q_end = q1(params, self.data, &post)? + q2(params, self.data, &post)?;
        let loglik = observed_loglik(self.data, params)?;
        let row = EmIteration {
            q_start,
            q_end,
            loglik,
            extrapolated: false,
            posterior_sum: post.mean.sum(),
            posterior_l1: post.mean.lp_norm(1),
        };
        Ok((row, inner_ok))
    }

    fn ln_bounds(&self, l: usize) -> (f64, f64) {
        ((self.nu_ref[l] / NU_RANGE).ln(), (self.nu_ref[l] * NU_RANGE).ln())
    }

    /// Unconstrained coordinates of the parameters the M-step moves.
    fn encode(&self, params: &LmgpParams) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &params.eps {
            out.push(e.mu);
            out.push(e.sigma2.ln());
            out.extend(e.kernel.nu.iter().map(|v| v.ln()));
            if matches!(self.config.nugget, NuggetMode::Estimate { .. }) {
                out.push(e.kernel.g.ln());
            }
        }
        out.push(params.sigma2_alpha.ln());
        out.extend(params.alpha.thetas.iter().map(|t| logit(t / PI)));
        out
    }

    fn decode(&self, template: &LmgpParams, u: &[f64]) -> LmgpParams {
        let mut params = template.clone();
        let mut it = u.iter().copied();
        let mut next = || it.next().expect("coordinate count matches the encoding");
        for e in &mut params.eps {
            e.mu = next();
            e.sigma2 = next().exp().max(self.floor);
            for l in 0..e.kernel.nu.len() {
                let (lo, hi) = self.ln_bounds(l);
                e.kernel.nu[l] = next().clamp(lo, hi).exp();
            }
            if let NuggetMode::Estimate { min, max } = self.config.nugget {
                e.kernel.g = next().exp().clamp(min, max);
            }
        }
        params.sigma2_alpha = next().exp().max(self.floor);
        for t in &mut params.alpha.thetas {
            *t = PI * sigmoid(next().clamp(-ANGLE_BOUND, ANGLE_BOUND));
        }
        params
    }
}

fn run_em(data: &ComponentData, mut params: LmgpParams, alpha_active: bool, config: &EmConfig, floor: f64) -> Result<EmFit> {
    params.validate(data)?;
    if params.variant == Variant::Cgp {
        params.alpha.kernel = CrossKernel::Constant;
    }
    if !alpha_active {
        params.sigma2_alpha = 0.0;
    }
    let post = AlphaPosterior::zero(data.n());
    let mut stepper = Stepper {
        data,
        config,
        floor,
        alpha_active,
        nu_ref: median_sq_distances(&data.x),
        blocks: eps_blocks(data, &post),
        alpha_problem: alpha_active.then(|| AlphaProblem::new(data, &params.alpha.kernel, &post)),
    };

    let mut trace = Vec::new();
    let mut prev_ll = observed_loglik(data, &params)?;
    if !alpha_active {
        let (row, inner_ok) = stepper.step(&mut params)?;
        trace.push(row);
        return Ok(EmFit {
            loglik: row.loglik,
            params,
            trace,
            converged: inner_ok,
            iterations: 1,
        });
    }

    let close = |a: f64, b: f64| (a - b).abs() <= config.tol * b.abs().max(1.0);
    let mut converged = false;
    let mut iterations = 0;
    let mut step_max = 1.0;
    while iterations < config.max_iter {
        let start = params.clone();
        let (row, _) = stepper.step(&mut params)?;
        iterations += 1;
        trace.push(row);
        if close(row.loglik, prev_ll) {
            converged = true;
            break;
        }
        prev_ll = row.loglik;
        if !config.accelerate || iterations >= config.max_iter {
            continue;
        }

        let first = params.clone();
        let (row, _) = stepper.step(&mut params)?;
        iterations += 1;
        trace.push(row);
        if close(row.loglik, prev_ll) {
            converged = true;
            break;
        }
        prev_ll = row.loglik;
        if iterations >= config.max_iter {
            break;
        }

        // SQUAREM: extrapolate along the two steps, then stabilize with one more
        let (u0, u1, u2) = (stepper.encode(&start), stepper.encode(&first), stepper.encode(&params));
        let r: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = u2.iter().zip(&u1).zip(&r).map(|((a, b), r)| a - b - r).collect();
        let (r_norm, v_norm) = (norm(&r), norm(&v));
        if !(v_norm > 0.0) || !r_norm.is_finite() || !v_norm.is_finite() {
            continue;
        }
        let alpha = (-r_norm / v_norm).clamp(-step_max, -1.0);
        if alpha == -step_max {
            step_max *= 4.0;
        }
        if alpha == -1.0 {
            continue;
        }
        let jump: Vec<f64> = (0..u0.len())
            .map(|i| u0[i] - 2.0 * alpha * r[i] + alpha * alpha * v[i])
            .collect();
        let mut trial = stepper.decode(&params, &jump);
        iterations += 1;
        match stepper.step(&mut trial) {
            Ok((mut row, _)) if row.loglik.is_finite() && row.loglik >= prev_ll => {
                row.extrapolated = true;
                trace.push(row);
                params = trial;
                if close(row.loglik, prev_ll) {
                    converged = true;
                    break;
                }
                prev_ll = row.loglik;
            }
            Ok(_) => step_max = (step_max / 4.0).max(1.0),
            Err(e) if e.is_numerical() => step_max = (step_max / 4.0).max(1.0),
            Err(e) => return Err(e),
        }
    }
    Ok(EmFit {
        loglik: trace.last().map_or(prev_ll, |t| t.loglik),
        params,
        trace,
        converged,
        iterations,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// LMGP-S: separate `μ, σ²_ε, ν, g` per category with a shared `α` field.
pub fn fit_em_per_category(data: &ComponentData, config: &EmConfig) -> Result<EmFit> {
    fit_em(data, Variant::LmgpS, config)
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One M-step. Returns whether every inner optimization reported convergence.
fn m_step(
    params: &mut LmgpParams,
    data: &ComponentData,
    blocks: &[EpsBlock],
    alpha: Option<&AlphaProblem>,
    config: &EmConfig,
    nu_ref: &[f64],
    floor: f64,
) -> Result<bool> {
    let p = data.p();
    let mut all_converged = true;
    let estimate_g = matches!(config.nugget, NuggetMode::Estimate { .. });

    for (gi, group) in eps_groups(params, data).iter().enumerate() {
        let members: Vec<&EpsBlock> = group.iter().map(|&k| &blocks[k]).collect();
        let current = &params.eps[gi];
        let mut lower: Vec<f64> = nu_ref.iter().map(|r| (r / NU_RANGE).ln()).collect();
        let mut upper: Vec<f64> = nu_ref.iter().map(|r| (r * NU_RANGE).ln()).collect();
        let mut x0: Vec<f64> = current.kernel.nu.iter().map(|v| v.ln()).collect();
        let fixed_g = match config.nugget {
            NuggetMode::Estimate { min, max } => {
                lower.push(min.ln());
                upper.push(max.ln());
                x0.push(current.kernel.g.max(min).ln());
                None
            }
            NuggetMode::Fixed(g) => Some(g),
        };
        let bounds = Bounds::new(lower, upper);
        let decode = |u: &[f64]| -> (Vec<f64>, f64) {
            let nu = u[..p].iter().map(|v| v.exp()).collect();
            let g = fixed_g.unwrap_or_else(|| u[p].exp());
            (nu, g)
        };
        let objective = |u: &[f64]| {
            let (nu, g) = decode(u);
            let ev = eval_eps(&members, &nu, g, None, true, floor).ok()?;
            let mut grad: Vec<f64> = ev.grad_nu.iter().zip(&nu).map(|(d, v)| -d * v).collect();
            if estimate_g {
                grad.push(-ev.grad_g * g);
            }
            Some((-ev.value, grad))
        };
        let result = minimize(objective, &x0, &bounds, &config.inner).ok_or(Error::Singular)?;
        all_converged &= result.converged;
        let (nu, g) = decode(&result.x);
        let ev = eval_eps(&members, &nu, g, None, false, floor)?;
        params.eps[gi] = EpsParams {
            mu: ev.mu,
            sigma2: ev.sigma2,
            kernel: NumericKernelParams { nu, g },
        };
    }

    if let Some(problem) = alpha {
        let thetas = &params.alpha.thetas;
        let x0: Vec<f64> = thetas
            .iter()
            .map(|t| logit(t / PI).clamp(-ANGLE_BOUND, ANGLE_BOUND))
            .collect();
        let bounds = Bounds::new(vec![-ANGLE_BOUND; x0.len()], vec![ANGLE_BOUND; x0.len()]);
        let decode = |u: &[f64]| -> Vec<f64> { u.iter().map(|v| PI * sigmoid(*v)).collect() };
        let objective = |u: &[f64]| {
            let ev = problem.eval(&decode(u), true, floor).ok()?;
            let grad = ev
                .grad
                .iter()
                .zip(u)
                .map(|(d, v)| {
                    let s = sigmoid(*v);
                    -d * PI * s * (1.0 - s)
                })
                .collect();
            Some((-ev.value, grad))
        };
        let result = minimize(objective, &x0, &bounds, &config.inner).ok_or(Error::Singular)?;
        all_converged &= result.converged;
        let thetas = decode(&result.x);
        let ev = problem.eval(&thetas, false, floor)?;
        params.alpha.thetas = thetas;
        params.sigma2_alpha = ev.sigma2;
    }
    Ok(all_converged)
}
