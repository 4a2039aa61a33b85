//! Box-constrained limited-memory quasi-Newton minimizer.
//!
//! A projected L-BFGS: the two-loop recursion supplies a search direction on
//! the coordinates that are not pinned at a bound, and a backtracking Armijo
//! search runs along the projected path. Steps are only accepted when they
//! lower the objective, so the returned point is never worse than the start.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self { lower, upper }
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsbConfig {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub pg_tol: f64,
    /// Stop when the relative objective decrease of an iteration drops below this.
    pub f_rel_tol: f64,
}

impl Default for LbfgsbConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            memory: 8,
            pg_tol: 1e-6,
            f_rel_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` over the box. `f` returns `None` where the objective cannot be
/// evaluated (treated as +∞ by the line search); it must be finite at `x0`.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &Bounds, config: &LbfgsbConfig) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut gx) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        let pg = projected_gradient(&x, &gx, bounds);
        if inf_norm(&pg) < config.pg_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = pg.iter().map(|g| *g != 0.0).collect();
        let mut d = two_loop(&gx, &history, &free);
        let slope = dot(&d, &gx);
        if !(slope < 0.0) || !slope.is_finite() {
            history.clear();
            d = pg.iter().map(|g| -g).collect();
        }

        let mut t = if history.is_empty() {
            (1.0 / inf_norm(&d).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&step) == 0.0 {
                break;
            }
            let decrease = dot(&gx, &step);
            if let Some((ft, gt)) = f(&trial) {
                evaluations += 1;
                if ft.is_finite() && ft <= fx + 1e-4 * decrease.min(0.0) && ft < fx {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            } else {
                evaluations += 1;
            }
            t *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            // no descent possible along the projected path
            converged = true;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - f_new) / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        gx = g_new;
        if rel < config.f_rel_tol {
            converged = true;
            break;
        }
    }
    debug_assert_eq!(x.len(), n);
    Some(Minimum {
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
    })
}

fn projected_gradient(x: &[f64], g: &[f64], bounds: &Bounds) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((xi, gi), (lo, hi))| {
            if (*xi <= *lo && *gi > 0.0) || (*xi >= *hi && *gi < 0.0) {
                0.0
            } else {
                *gi
            }
        })
        .collect()
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, free: &[bool]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(free)
            .map(|(a, f)| if *f { *a } else { 0.0 })
            .collect()
    };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let a = rho * dot(&s, &q);
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let gamma = dot(s, y) / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let s = mask(s);
        let y = mask(y);
        let b = rho * dot(&y, &q);
        for (qi, si) in q.iter_mut().zip(&s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
