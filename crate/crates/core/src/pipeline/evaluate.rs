//! Repeated stratified train/test evaluation with the EL1 metric.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::dataset::Dataset;
use super::metrics::{el1, CdfCurve};
use crate::curve::{ISplineBasis, QuantileFit};
use crate::error::{Error, Result};
use crate::lmgp::Variant;
use crate::model::{fit_curves, FittedModel, ModelConfig, TrainingCurves};

/// What predicted CDFs are compared against.
#[derive(Clone, Debug, Default)]
pub enum Reference {
    /// The smoothed spline CDF of each held-out configuration's replicates.
    #[default]
    Smoothed,
    /// Known CDFs, one per dataset configuration.
    Curves(Vec<CdfCurve>),
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub variants: Vec<Variant>,
    pub train_proportions: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Curve and component settings; the variant field is ignored.
    pub model: ModelConfig,
    pub reference: Reference,
}

/// One (variant, proportion, repeat) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub variant: Variant,
    pub proportion: f64,
    pub repeat: usize,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// EL1 averaged over the test configurations.
    pub el1: f64,
    /// Per test configuration (dataset row index, EL1).
    pub per_config: Vec<(usize, f64)>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub proportion: f64,
    pub mean_el1: f64,
    pub sd_el1: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub aggregates: Vec<Aggregate>,
}

/// Paired comparison of two variants over the same splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedComparison {
    /// Mean of `EL1(a) − EL1(b)`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub pairs: usize,
    pub t_statistic: f64,
    /// One-sided p-value for `mean(a − b) < 0`.
    pub p_value_less: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one split. Depends only on the run seed, the proportion and the
/// repeat index, so adding or removing variants leaves the splits unchanged.
pub fn split_seed(seed: u64, proportion: f64, repeat: usize) -> u64 {
    splitmix64(seed ^ splitmix64(proportion.to_bits() ^ splitmix64(repeat as u64)))
}

/// Stratified split of the rows: within each category
/// `round(proportion · n_k)` rows (at least 2, leaving at least 1) train.
pub fn stratified_split(categories: &[usize], proportion: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(Error::invalid(format!("training proportion {proportion} outside (0, 1)")));
    }
    let c = categories.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..c {
        let mut rows: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == k).collect();
        if rows.len() < 3 {
            return Err(Error::invalid(format!(
                "category {k} has {} configurations; stratified splits need at least 3",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let n_train = ((proportion * rows.len() as f64).round() as usize).clamp(2, rows.len() - 1);
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

struct Prepared {
    basis: ISplineBasis,
    fits: Vec<QuantileFit>,
    references: Vec<CdfCurve>,
    categories: Vec<usize>,
}

fn prepare(dataset: &Dataset, config: &EvalConfig) -> Result<Prepared> {
    let basis = config.model.basis()?;
    let fits = fit_curves(&dataset.samples, &basis)?;
    let references = match &config.reference {
        Reference::Smoothed => fits
            .par_iter()
            .map(|f| CdfCurve::from_quantile(f, &basis))
            .collect::<Result<Vec<_>>>()?,
        Reference::Curves(curves) => {
            if curves.len() != dataset.len() {
                return Err(Error::dims("one reference curve per configuration is required"));
            }
            curves.clone()
        }
    };
    Ok(Prepared {
        basis,
        fits,
        references,
        categories: dataset.category_indices(),
    })
}

fn run_cell(
    dataset: &Dataset,
    prep: &Prepared,
    config: &EvalConfig,
    variant: Variant,
    proportion: f64,
    repeat: usize,
) -> Result<EvalRecord> {
    let seed = split_seed(config.seed, proportion, repeat);
    let (train, test) = stratified_split(&prep.categories, proportion, seed)?;
    let x = dataset.x_matrix();
    let curves = TrainingCurves {
        x: nalgebra::DMatrix::from_fn(train.len(), x.ncols(), |i, j| x[(train[i], j)]),
        z: train.iter().map(|&i| prep.categories[i]).collect(),
        categories: dataset.categories(),
        fits: train.iter().map(|&i| prep.fits[i].clone()).collect(),
    };
    let model_config = ModelConfig {
        variant,
        ..config.model.clone()
    };
    let model = FittedModel::fit_curves(&curves, prep.basis.clone(), &model_config)?;
    let per_config = test
        .iter()
        .map(|&i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let fit = model.predict_fit(&row, prep.categories[i])?;
            let predicted = CdfCurve::from_quantile(&fit, &prep.basis)?;
            Ok((i, el1(&prep.references[i], &predicted)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_config.iter().map(|p| p.1).sum::<f64>() / per_config.len() as f64;
    Ok(EvalRecord {
        variant,
        proportion,
        repeat,
        split_seed: seed,
        n_train: train.len(),
        n_test: test.len(),
        el1: mean,
        per_config,
        converged: model.all_converged(),
    })
}

/// Runs every (variant, proportion, repeat) cell; cells run in parallel and
/// the report is ordered by variant, proportion and repeat.
pub fn evaluate(dataset: &Dataset, config: &EvalConfig) -> Result<EvaluationReport> {
    if config.variants.is_empty() || config.train_proportions.is_empty() || config.repeats == 0 {
        return Err(Error::invalid("evaluation needs variants, proportions and at least one repeat"));
    }
    let prep = prepare(dataset, config)?;
    let cells: Vec<(Variant, f64, usize)> = config
        .variants
        .iter()
        .flat_map(|&v| {
            config
                .train_proportions
                .iter()
                .flat_map(move |&p| (0..config.repeats).map(move |r| (v, p, r)))
        })
        .collect();
    let records = cells
        .par_iter()
        .map(|&(v, p, r)| run_cell(dataset, &prep, config, v, p, r))
        .collect::<Result<Vec<_>>>()?;
    let aggregates = aggregate(&records);
    Ok(EvaluationReport {
        seed: config.seed,
        records,
        aggregates,
    })
}

fn aggregate(records: &[EvalRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(Variant, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(v, p)| v == r.variant && p == r.proportion) {
            keys.push((r.variant, r.proportion));
        }
    }
    keys.into_iter()
        .map(|(v, p)| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.variant == v && r.proportion == p)
                .map(|r| r.el1)
                .collect();
            let (mean, sd) = mean_sd(&vals);
            Aggregate {
                variant: v,
                proportion: p,
                mean_el1: mean,
                sd_el1: sd,
                repeats: vals.len(),
            }
        })
        .collect()
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl EvaluationReport {
    pub fn mean_el1(&self, variant: Variant, proportion: f64) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.proportion == proportion)
            .map(|a| a.mean_el1)
    }

    /// Paired `EL1(a) − EL1(b)` over the repeats at one proportion.
    pub fn paired(&self, a: Variant, b: Variant, proportion: f64) -> Option<PairedComparison> {
        let pick = |v: Variant| -> Vec<(usize, f64)> {
            self.records
                .iter()
                .filter(|r| r.variant == v && r.proportion == proportion)
                .map(|r| (r.repeat, r.el1))
                .collect()
        };
        let (ra, rb) = (pick(a), pick(b));
        let diffs: Vec<f64> = ra
            .iter()
            .filter_map(|(rep, ea)| rb.iter().find(|(r, _)| r == rep).map(|(_, eb)| ea - eb))
            .collect();
        if diffs.len() < 2 {
            return None;
        }
        let (mean, sd) = mean_sd(&diffs);
        let n = diffs.len() as f64;
        let t = if sd > 0.0 {
            mean / (sd / n.sqrt())
        } else if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        };
        let p = if t.is_finite() {
            StudentsT::new(0.0, 1.0, n - 1.0).map_or(f64::NAN, |d| d.cdf(t))
        } else if t < 0.0 {
            0.0
        } else {
            1.0
        };
        Some(PairedComparison {
            mean_diff: mean,
            sd_diff: sd,
            pairs: diffs.len(),
            t_statistic: t,
            p_value_less: p,
        })
    }

    /// One line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,train_proportion,repeat,split_seed,n_train,n_test,el1,converged\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant, r.proportion, r.repeat, r.split_seed, r.n_train, r.n_test, r.el1, r.converged
            );
        }
        out
    }

    /// Mean (and SD) of EL1 by training proportion and variant.
    pub fn to_table(&self) -> String {
        let mut variants: Vec<Variant> = Vec::new();
        let mut props: Vec<f64> = Vec::new();
        for a in &self.aggregates {
            if !variants.contains(&a.variant) {
                variants.push(a.variant);
            }
            if !props.contains(&a.proportion) {
                props.push(a.proportion);
            }
        }
        let mut out = format!("Average EL1 over train/test splits (seed {})\n", self.seed);
        let _ = write!(out, "{:>10}", "train");
        for v in &variants {
            let _ = write!(out, " {:>20}", v.name());
        }
        out.push('\n');
        for p in &props {
            let _ = write!(out, "{:>10}", p);
            for v in &variants {
                let cell = self
                    .aggregates
                    .iter()
                    .find(|a| a.variant == *v && a.proportion == *p)
                    .map_or_else(|| "-".to_string(), |a| format!("{:.6} ({:.6})", a.mean_el1, a.sd_el1));
                let _ = write!(out, " {cell:>20}");
            }
            out.push('\n');
        }
        let unconverged = self.records.iter().filter(|r| !r.converged).count();
        if unconverged > 0 {
            let _ = writeln!(out, "{unconverged} cell(s) hit the EM iteration cap");
        }
        out
    }
}
