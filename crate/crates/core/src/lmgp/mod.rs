//! Linear mixed Gaussian process `w = μ + α + ε` for one column of SVD scores.
//!
//! `ε` carries the within-category correlation (block-diagonal `Σ_ε`), `α` the
//! between-category correlation (`Σ_α = σ²_α Ω_α`). The four variants differ in
//! which pieces are present and shared:
//!
//! | variant | `ε` parameters      | `α` field                          |
//! |---------|---------------------|------------------------------------|
//! | GP      | one set per category | none                              |
//! | CGP     | shared              | `ρ(z, z′)` with no distance cutoff |
//! | LMGP    | shared              | `ρ(z, z′) κ(r)`, compact support   |
//! | LMGP-S  | one set per category | `ρ(z, z′) κ(r)`, compact support  |

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{category_blocks, omega_eps_block, CategoryCorrelationParams, NumericKernelParams};

mod estep;
mod fit;
mod mstep;
mod predict;

pub use estep::{e_step, observed_loglik, q1, q1_blocks, q2};
pub use fit::{fit_em, fit_em_per_category, initial_params, EmConfig, EmFit, EmIteration, NuggetMode, Start};
pub use mstep::{m_step_closed, profile_gradients, profile_values, AlphaCorrelation, ClosedForm, ProfileGradients, ProfileValues};
pub use predict::{predict_w, ComponentPredictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "cgp")]
    Cgp,
    #[serde(rename = "lmgp")]
    Lmgp,
    #[serde(rename = "lmgp-s")]
    LmgpS,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Lmgp, Variant::LmgpS, Variant::Gp, Variant::Cgp];

    /// Whether `μ, σ²_ε, ν, g` are estimated separately for each category.
    pub fn per_category_eps(self) -> bool {
        matches!(self, Variant::Gp | Variant::LmgpS)
    }

    pub fn has_alpha(self) -> bool {
        !matches!(self, Variant::Gp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gp => "gp",
            Variant::Cgp => "cgp",
            Variant::Lmgp => "lmgp",
            Variant::LmgpS => "lmgp-s",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp" => Ok(Variant::Gp),
            "cgp" => Ok(Variant::Cgp),
            "lmgp" => Ok(Variant::Lmgp),
            "lmgp-s" | "lmgps" | "lmgp_s" => Ok(Variant::LmgpS),
            other => Err(Error::invalid(format!("unknown model variant '{other}'"))),
        }
    }
}

/// One SVD score column with its inputs, rows grouped by category `0..c`.
#[derive(Clone, Debug)]
pub struct ComponentData {
    pub w: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: Vec<usize>,
    blocks: Vec<Range<usize>>,
}

impl ComponentData {
    pub fn new(w: DVector<f64>, x: DMatrix<f64>, z: Vec<usize>) -> Result<Self> {
        let n = w.len();
        if x.nrows() != n || z.len() != n {
            return Err(Error::dims(format!(
                "w has {n} entries, X has {} rows, Z has {} labels",
                x.nrows(),
                z.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("no training rows"));
        }
        if !w.iter().chain(x.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("component data"));
        }
        let blocks = category_blocks(&z)?;
        for (k, b) in blocks.iter().enumerate() {
            if z[b.start] != k {
                return Err(Error::invalid(format!(
                    "category labels must be 0..c without gaps; category {k} is missing"
                )));
            }
        }
        Ok(Self { w, x, z, blocks })
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_categories(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn category_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Same inputs with a different response column.
    pub fn with_w(&self, w: DVector<f64>) -> Result<Self> {
        if w.len() != self.n() {
            return Err(Error::dims("replacement response has the wrong length"));
        }
        Ok(Self {
            w,
            x: self.x.clone(),
            z: self.z.clone(),
            blocks: self.blocks.clone(),
        })
    }
}

/// `θ_ε` for one category (or for all categories when shared).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsParams {
    pub mu: f64,
    pub sigma2: f64,
    pub kernel: NumericKernelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmgpParams {
    pub variant: Variant,
    /// One entry when shared, one per category otherwise.
    pub eps: Vec<EpsParams>,
    pub sigma2_alpha: f64,
    pub alpha: CategoryCorrelationParams,
}

impl LmgpParams {
    pub fn eps_for(&self, k: usize) -> &EpsParams {
        if self.eps.len() == 1 {
            &self.eps[0]
        } else {
            &self.eps[k]
        }
    }

    pub fn validate(&self, data: &ComponentData) -> Result<()> {
        let c = data.num_categories();
        let expected = if self.variant.per_category_eps() { c } else { 1 };
        if self.eps.len() != expected {
            return Err(Error::dims(format!(
                "{} ε parameter sets for variant {} with {c} categories",
                self.eps.len(),
                self.variant
            )));
        }
        for e in &self.eps {
            e.kernel.validate(data.p())?;
            if !(e.sigma2 > 0.0) || !e.mu.is_finite() {
                return Err(Error::invalid("σ²_ε must be positive and μ finite"));
            }
        }
        if self.variant.has_alpha() {
            if !(self.sigma2_alpha >= 0.0) {
                return Err(Error::invalid("σ²_α must be nonnegative"));
            }
            self.alpha.kernel.validate(data.p())?;
        }
        Ok(())
    }

    /// `μ_{k(i)}` for every training row.
    pub fn mean_vector(&self, data: &ComponentData) -> DVector<f64> {
        DVector::from_iterator(data.n(), data.z.iter().map(|&k| self.eps_for(k).mu))
    }

    /// Block-diagonal `Σ_ε`.
    pub fn sigma_eps(&self, data: &ComponentData) -> DMatrix<f64> {
        let n = data.n();
        let mut m = DMatrix::zeros(n, n);
        for (k, b) in data.blocks().iter().enumerate() {
            let e = self.eps_for(k);
            let block = omega_eps_block(&data.x, b.clone(), &e.kernel) * e.sigma2;
            m.view_mut((b.start, b.start), (b.len(), b.len())).copy_from(&block);
        }
        m
    }

    /// `Σ_α = σ²_α Ω_α` (zero for the GP variant).
    pub fn sigma_alpha(&self, data: &ComponentData) -> Result<DMatrix<f64>> {
        let n = data.n();
        if !self.variant.has_alpha() || self.sigma2_alpha == 0.0 {
            return Ok(DMatrix::zeros(n, n));
        }
        let omega = AlphaCorrelation::build(data, &self.alpha)?.matrix(data);
        Ok(omega * self.sigma2_alpha)
    }
}

/// Posterior of the centered categorical effect `Cα | w`.
#[derive(Clone, Debug)]
pub struct AlphaPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl AlphaPosterior {
    pub fn zero(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
        }
    }
}
