//! Synthetic replicate data with a known outcome distribution per configuration.
//!
//! Each configuration's outcome is a Gaussian mixture. Component means are
//! quadratic polynomials in `x`, component weights a softmax of linear scores,
//! and every category adds its own smooth shift `δ_k(x)` to all means. The
//! shifts are sums of Gaussian bumps whose coefficients are correlated across
//! categories, which is the structure the cross-category models exploit.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dataset::{ConfigPoint, Dataset, Schema};
use super::metrics::CdfCurve;
use crate::error::{Error, Result};

/// Points used to tabulate a true CDF.
const TRUTH_TABLE_POINTS: usize = 4000;
/// Half-width of the tabulated range in component standard deviations.
const TRUTH_SPAN: f64 = 8.0;

/// One numeric input, sampled on an equally spaced grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputGrid {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub levels: usize,
}

/// Linear score `a + bᵀx`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub linear: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    /// Mean `a + Σ_l b_l x_l + Σ_l c_l x_l²`.
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<f64>,
    pub sd: f64,
    /// Unnormalized log-weight; weights are the softmax over components.
    #[serde(default)]
    pub weight: Linear,
}

/// Category shift field `δ_k(x) = Σ_r a_{kr} exp(−‖x − c_r‖² / (2ℓ²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftField {
    /// Standard deviation of each coefficient `a_{kr}`.
    pub amplitude: f64,
    /// Bump width `ℓ`, in input units.
    pub length_scale: f64,
    /// Correlation of `a_{kr}` and `a_{k′r}` for `k ≠ k′`, in `(−1/(c−1), 1)`.
    #[serde(default)]
    pub correlation: f64,
    /// Number of bump centers, drawn uniformly in the input box.
    pub centers: usize,
    /// Fixed offset added to category `k`'s shift (defaults to zero).
    #[serde(default)]
    pub offsets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub inputs: Vec<InputGrid>,
    /// Name of the categorical column.
    #[serde(default = "default_category_name")]
    pub category_name: String,
    pub categories: Vec<String>,
    #[serde(default = "default_outcome_name")]
    pub outcome: String,
    pub replicates: usize,
    pub components: Vec<MixtureComponent>,
    pub shift: Option<ShiftField>,
}

fn default_category_name() -> String {
    "category".into()
}

fn default_outcome_name() -> String {
    "y".into()
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.inputs.len();
        if self.categories.is_empty() {
            return Err(Error::invalid("at least one category is required"));
        }
        let mut sorted = self.categories.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.categories.len() || sorted.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("category names must be distinct and nonempty"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be positive"));
        }
        for g in &self.inputs {
            if g.levels == 0 || !(g.max >= g.min) || !g.min.is_finite() || !g.max.is_finite() {
                return Err(Error::invalid(format!("input {} has an invalid grid", g.name)));
            }
            if g.levels > 1 && g.max == g.min {
                return Err(Error::invalid(format!("input {} repeats a single level", g.name)));
            }
        }
        if self.components.is_empty() {
            return Err(Error::invalid("at least one mixture component is required"));
        }
        for (j, c) in self.components.iter().enumerate() {
            let lens_ok = c.linear.len() <= p && c.quadratic.len() <= p && c.weight.linear.len() <= p;
            if !lens_ok {
                return Err(Error::invalid(format!("component {j} has more coefficients than inputs")));
            }
            if !(c.sd >= 0.0) || !c.sd.is_finite() {
                return Err(Error::invalid(format!("component {j} needs a finite nonnegative sd")));
            }
        }
        if let Some(s) = &self.shift {
            let c = self.categories.len() as f64;
            let rho_ok = s.correlation < 1.0 && (c < 2.0 || s.correlation > -1.0 / (c - 1.0));
            if !(s.amplitude >= 0.0) || !(s.length_scale > 0.0) || !rho_ok {
                return Err(Error::invalid("shift field needs amplitude ≥ 0, length scale > 0 and a valid correlation"));
            }
            if !s.offsets.is_empty() && s.offsets.len() != self.categories.len() {
                return Err(Error::invalid("shift offsets need one value per category"));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            numeric: self.inputs.iter().map(|g| g.name.clone()).collect(),
            categorical: vec![self.category_name.clone()],
            outcome: self.outcome.clone(),
        }
    }

    /// Full factorial grid of the numeric inputs.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for g in &self.inputs {
            let levels: Vec<f64> = (0..g.levels)
                .map(|i| {
                    if g.levels == 1 {
                        g.min
                    } else {
                        g.min + (g.max - g.min) * i as f64 / (g.levels - 1) as f64
                    }
                })
                .collect();
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    levels.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push(v);
                        next
                    })
                })
                .collect();
        }
        out
    }
}

/// The outcome distribution at one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueDistribution {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl TrueDistribution {
    pub fn cdf(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| {
                let f = if *s > 0.0 {
                    Normal::new(*m, *s).expect("positive sd").cdf(y)
                } else if y >= *m {
                    1.0
                } else {
                    0.0
                };
                w * f
            })
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Range holding all but a negligible part of the mass.
    pub fn span(&self) -> (f64, f64) {
        let lo = self
            .means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| m - TRUTH_SPAN * s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| m + TRUTH_SPAN * s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// `inf{y : F(y) ≥ p}` by bisection on the mixture CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = self.span();
        if p <= 0.0 {
            return lo;
        }
        if p >= 1.0 {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * hi.abs().max(1.0) {
                break;
            }
        }
        hi
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Tabulated CDF for EL1 comparisons.
    pub fn cdf_curve(&self) -> Result<CdfCurve> {
        let (lo, hi) = self.span();
        if hi > lo {
            CdfCurve::from_cdf_fn(|y| self.cdf(y), lo, hi, TRUTH_TABLE_POINTS)
        } else {
            CdfCurve::point_mass(lo)
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[j] + self.sds[j] * z
    }
}

/// The generating model with its random shift coefficients drawn.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SimulationSpec,
    centers: Vec<Vec<f64>>,
    /// `coef[(k, r)]`.
    coef: DMatrix<f64>,
}

impl Generator {
    pub fn new(spec: &SimulationSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.categories.len();
        let (centers, coef) = match &spec.shift {
            None => (Vec::new(), DMatrix::zeros(c, 0)),
            Some(s) => {
                let centers: Vec<Vec<f64>> = (0..s.centers)
                    .map(|_| spec.inputs.iter().map(|g| g.min + (g.max - g.min) * rng.random::<f64>()).collect())
                    .collect();
                let corr = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { s.correlation });
                let l = corr
                    .cholesky()
                    .ok_or_else(|| Error::invalid("shift correlation matrix is not positive definite"))?
                    .l();
                let mut coef = DMatrix::zeros(c, s.centers);
                for r in 0..s.centers {
                    let xi = nalgebra::DVector::from_fn(c, |_, _| StandardNormal.sample(rng));
                    coef.set_column(r, &(&l * xi * s.amplitude));
                }
                (centers, coef)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            centers,
            coef,
        })
    }

    pub fn shift(&self, x: &[f64], k: usize) -> f64 {
        let Some(s) = &self.spec.shift else {
            return 0.0;
        };
        let bumps: f64 = self
            .centers
            .iter()
            .enumerate()
            .map(|(r, c)| {
                let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                self.coef[(k, r)] * (-d2 / (2.0 * s.length_scale * s.length_scale)).exp()
            })
            .sum();
        bumps + s.offsets.get(k).copied().unwrap_or(0.0)
    }

    pub fn truth(&self, x: &[f64], k: usize) -> TrueDistribution {
        let dot = |coefs: &[f64], f: &dyn Fn(f64) -> f64| -> f64 { coefs.iter().zip(x).map(|(c, v)| c * f(*v)).sum() };
        let delta = self.shift(x, k);
        let comps = &self.spec.components;
        let scores: Vec<f64> = comps
            .iter()
            .map(|c| c.weight.intercept + dot(&c.weight.linear, &|v| v))
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        TrueDistribution {
            weights: exps.iter().map(|e| e / total).collect(),
            means: comps
                .iter()
                .map(|c| c.intercept + dot(&c.linear, &|v| v) + dot(&c.quadratic, &|v| v * v) + delta)
                .collect(),
            sds: comps.iter().map(|c| c.sd).collect(),
        }
    }
}

/// A simulated dataset with the true distribution of each configuration,
/// aligned with `dataset.configs`.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: Vec<TrueDistribution>,
    pub generator: Generator,
}

impl Simulation {
    /// True distribution at an arbitrary configuration.
    pub fn truth_at(&self, x: &[f64], category: &str) -> Result<TrueDistribution> {
        let k = self
            .generator
            .spec
            .categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
        Ok(self.generator.truth(x, k))
    }
}

pub fn simulate(spec: &SimulationSpec, seed: u64) -> Result<Simulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = Generator::new(spec, &mut rng)?;
    let grid = spec.grid();
    let mut rows = Vec::with_capacity(grid.len() * spec.categories.len() * spec.replicates);
    for (k, label) in spec.categories.iter().enumerate() {
        for x in &grid {
            let truth = generator.truth(x, k);
            for _ in 0..spec.replicates {
                rows.push((
                    ConfigPoint {
                        x: x.clone(),
                        z: vec![label.clone()],
                    },
                    truth.sample(&mut rng),
                ));
            }
        }
    }
    let dataset = Dataset::from_rows(spec.schema(), rows)?;
    let truth = dataset
        .configs
        .iter()
        .map(|c| {
            let k = spec.categories.iter().position(|l| *l == c.z[0]).expect("generated label");
            generator.truth(&c.x, k)
        })
        .collect();
    Ok(Simulation {
        dataset,
        truth,
        generator,
    })
}
