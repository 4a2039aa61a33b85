//! The full distributional model: spline curves, SVD scores and one fitted
//! component model per retained score column.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{ecdf, fit_quantile, ISplineBasis, QuantileFit, ReplicateSample, DEFAULT_INTERIOR_KNOTS, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::lmgp::{fit_em, ComponentData, ComponentPredictor, EmConfig, LmgpParams, Variant};
use crate::pipeline::dataset::{Dataset, Preprocessing, Schema};
use crate::reduction::{decompose, reconstruct_beta, ComponentSelection, Truncation};

const FORMAT: &str = "distpred-model";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub order: usize,
    pub interior_knots: usize,
    pub selection: ComponentSelection,
    pub truncation: Truncation,
    pub em: EmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LmgpS,
            order: DEFAULT_ORDER,
            interior_knots: DEFAULT_INTERIOR_KNOTS,
            selection: ComponentSelection::default(),
            truncation: Truncation::default(),
            em: EmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn basis(&self) -> Result<ISplineBasis> {
        ISplineBasis::new(self.order, self.interior_knots)
    }
}

/// Fitted parameters of one score column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub params: LmgpParams,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// How raw configurations map to model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub schema: Schema,
    pub preprocessing: Preprocessing,
}

/// Training data for [`FittedModel::fit_curves`]: category-indexed inputs and
/// one smoothed quantile fit per configuration.
#[derive(Clone, Debug)]
pub struct TrainingCurves {
    pub x: DMatrix<f64>,
    /// Category index per row, in `0..categories.len()`.
    pub z: Vec<usize>,
    pub categories: Vec<String>,
    pub fits: Vec<QuantileFit>,
}

/// A predicted distribution at one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionPrediction {
    pub fit: QuantileFit,
    /// `(p, Q̂(p))` on the requested grid.
    pub quantiles: Vec<(f64, f64)>,
    /// The numeric inputs lie outside the training bounding box, where
    /// predictions tend to be poor.
    pub outside_training_box: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedModel {
    pub variant: Variant,
    pub basis: ISplineBasis,
    pub truncation: Truncation,
    /// All singular values of the training coefficient matrix.
    pub lambda: Vec<f64>,
    /// First `d′` columns of `V`.
    pub v: DMatrix<f64>,
    /// Training inputs, category-sorted.
    pub x: DMatrix<f64>,
    pub z: Vec<usize>,
    pub categories: Vec<String>,
    /// Training scores `W_{d′}`.
    pub w: DMatrix<f64>,
    pub components: Vec<ComponentFit>,
    #[serde(default)]
    pub inputs: Option<InputRecord>,
    #[serde(skip)]
    predictors: Vec<ComponentPredictor>,
}

#[derive(Serialize)]
struct FileRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a FittedModel,
}

#[derive(Deserialize)]
struct FileOwned {
    format: String,
    version: u32,
    model: FittedModel,
}

/// Smoothed quantile fit of every sample.
pub fn fit_curves(samples: &[ReplicateSample], basis: &ISplineBasis) -> Result<Vec<QuantileFit>> {
    samples
        .par_iter()
        .map(|s| fit_quantile(&ecdf(s)?, basis))
        .collect()
}

impl FittedModel {
    /// Smooths each configuration's replicates and fits the model.
    pub fn fit(dataset: &Dataset, config: &ModelConfig) -> Result<Self> {
        let basis = config.basis()?;
        let fits = fit_curves(&dataset.samples, &basis)?;
        let curves = TrainingCurves {
            x: dataset.x_matrix(),
            z: dataset.category_indices(),
            categories: dataset.categories(),
            fits,
        };
        let mut model = Self::fit_curves(&curves, basis, config)?;
        model.inputs = dataset.preprocessing.as_ref().map(|p| InputRecord {
            schema: dataset.schema.clone(),
            preprocessing: p.clone(),
        });
        if model.inputs.is_none() {
            model.inputs = Some(InputRecord {
                schema: dataset.schema.clone(),
                preprocessing: Preprocessing::identity(dataset.schema.numeric.len()),
            });
        }
        Ok(model)
    }

    /// Fits the model to already smoothed curves. Rows need not be sorted;
    /// every category in `categories` must appear at least once.
    pub fn fit_curves(data: &TrainingCurves, basis: ISplineBasis, config: &ModelConfig) -> Result<Self> {
        let n = data.fits.len();
        if data.x.nrows() != n || data.z.len() != n {
            return Err(Error::dims("inputs, categories and curves differ in length"));
        }
        if n == 0 {
            return Err(Error::invalid("no training configurations"));
        }
        let c = data.categories.len();
        if let Some(&bad) = data.z.iter().find(|&&k| k >= c) {
            return Err(Error::UnknownCategory(format!("index {bad}")));
        }
        for k in 0..c {
            if !data.z.contains(&k) {
                return Err(Error::invalid(format!(
                    "category {} has no training configurations",
                    data.categories[k]
                )));
            }
        }
        let d = basis.num_coefficients();
        if let Some(bad) = data.fits.iter().find(|f| f.beta.len() != d) {
            return Err(Error::dims(format!(
                "curve has {} coefficients, basis expects {d}",
                bad.beta.len()
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| data.z[i]);
        let x = DMatrix::from_fn(n, data.x.ncols(), |i, j| data.x[(order[i], j)]);
        let z: Vec<usize> = order.iter().map(|&i| data.z[i]).collect();
        let b = DMatrix::from_fn(n, d, |i, j| data.fits[order[i]].beta[j]);

        let svd = decompose(&b)?;
        let dprime = config.selection.resolve(&svd.lambda)?;
        let w = svd.w.columns(0, dprime).into_owned();
        let v = svd.v.columns(0, dprime).into_owned();

        let template = ComponentData::new(DVector::zeros(n), x.clone(), z.clone())?;
        let components = (0..dprime)
            .into_par_iter()
            .map(|j| {
                let cd = template.with_w(w.column(j).into_owned())?;
                let fit = fit_em(&cd, config.variant, &config.em)?;
                Ok(ComponentFit {
                    params: fit.params,
                    loglik: fit.loglik,
                    converged: fit.converged,
                    iterations: fit.iterations,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut model = Self {
            variant: config.variant,
            basis,
            truncation: config.truncation,
            lambda: svd.lambda,
            v,
            x,
            z,
            categories: data.categories.clone(),
            w,
            components,
            inputs: None,
            predictors: Vec::new(),
        };
        model.build_predictors()?;
        Ok(model)
    }

    fn build_predictors(&mut self) -> Result<()> {
        let template = ComponentData::new(DVector::zeros(self.x.nrows()), self.x.clone(), self.z.clone())?;
        self.predictors = self
            .components
            .par_iter()
            .enumerate()
            .map(|(j, comp)| {
                let cd = template.with_w(self.w.column(j).into_owned())?;
                ComponentPredictor::new(&cd, &comp.params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Number of retained components `d′`.
    pub fn dprime(&self) -> usize {
        self.components.len()
    }

    pub fn all_converged(&self) -> bool {
        self.components.iter().all(|c| c.converged)
    }

    pub fn category_index(&self, label: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownCategory(label.to_string()))
    }

    /// Whether `x0` lies outside the bounding box of the training inputs.
    pub fn outside_training_box(&self, x0: &[f64]) -> bool {
        x0.iter().enumerate().any(|(j, &v)| {
            let col = self.x.column(j);
            v < col.min() || v > col.max()
        })
    }

    /// `ŵ₀` for every retained component.
    pub fn predict_scores(&self, x0: &[f64], z0: usize) -> Result<Vec<f64>> {
        if z0 >= self.categories.len() {
            return Err(Error::UnknownCategory(format!("index {z0}")));
        }
        self.predictors.iter().map(|p| p.predict(x0, z0)).collect()
    }

    /// Predicted spline coefficients, negatives truncated.
    pub fn predict_fit(&self, x0: &[f64], z0: usize) -> Result<QuantileFit> {
        let scores = self.predict_scores(x0, z0)?;
        reconstruct_beta(&scores, &self.v, self.dprime(), self.truncation)
    }

    pub fn predict_distribution(&self, x0: &[f64], z0: usize, p_grid: &[f64]) -> Result<DistributionPrediction> {
        if let Some(p) = p_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        let fit = self.predict_fit(x0, z0)?;
        let quantiles = p_grid.iter().map(|&p| (p, fit.value(&self.basis, p))).collect();
        Ok(DistributionPrediction {
            fit,
            quantiles,
            outside_training_box: self.outside_training_box(x0),
        })
    }

    /// Maps raw-scale numeric inputs and categorical labels to model inputs.
    pub fn encode(&self, raw_x: &[f64], labels: &[String]) -> Result<(Vec<f64>, usize)> {
        let x = match &self.inputs {
            Some(rec) => rec.preprocessing.transform_inputs(&rec.schema, raw_x)?,
            None => raw_x.to_vec(),
        };
        let z = self.category_index(&labels.join(crate::pipeline::dataset::LABEL_SEPARATOR))?;
        Ok((x, z))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FileRef {
            format: FORMAT,
            version: VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FileOwned = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(Error::ModelFormat(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {} (expected {VERSION})",
                file.version
            )));
        }
        let mut model = file.model;
        model.basis.ensure_knots();
        let n = model.x.nrows();
        let dprime = model.components.len();
        if model.z.len() != n || model.w.shape() != (n, dprime) || model.v.ncols() != dprime {
            return Err(Error::ModelFormat("inconsistent array shapes".into()));
        }
        if model.v.nrows() != model.basis.num_coefficients() {
            return Err(Error::ModelFormat("V does not match the spline basis".into()));
        }
        model.build_predictors()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmgp::NuggetMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curves(rng: &mut ChaCha8Rng, basis: &ISplineBasis) -> TrainingCurves {
        let sizes = [6, 5, 7];
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut fits = Vec::new();
        for (k, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                let xi = (i as f64 + rng.random::<f64>()) / s as f64;
                x.push(xi);
                z.push(k);
                let loc = (3.0 * xi).sin() + 0.4 * k as f64;
                let spread = 0.5 + 0.3 * xi;
                let samples: Vec<f64> = (0..40).map(|_| loc + spread * rng.random::<f64>()).collect();
                fits.push(fit_quantile(&crate::curve::ecdf_values(&samples).unwrap(), basis).unwrap());
            }
        }
        TrainingCurves {
            x: DMatrix::from_column_slice(x.len(), 1, &x),
            z,
            categories: vec!["a".into(), "b".into(), "c".into()],
            fits,
        }
    }

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            order: 2,
            interior_knots: 4,
            selection: ComponentSelection::Fixed(3),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = small_config(Variant::Lmgp);
        let basis = config.basis().unwrap();
        let data = curves(&mut rng, &basis);
        let model = FittedModel::fit_curves(&data, basis, &config).unwrap();
        let text = model.to_json().unwrap();
        let back = FittedModel::from_json(&text).unwrap();
        assert_eq!(back.components, model.components);
        assert_eq!(back.v, model.v);
        assert_eq!(back.w, model.w);
        assert_eq!(back.x, model.x);
        assert_eq!(back.lambda, model.lambda);
        assert_eq!(back.basis, model.basis);
        assert_eq!(back.to_json().unwrap(), text);
        for z0 in 0..3 {
            let a = model.predict_fit(&[0.37], z0).unwrap();
            let b = back.predict_fit(&[0.37], z0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            FittedModel::from_json(r#"{"format":"other","version":1,"model":{}}"#),
            Err(Error::Json(_) | Error::ModelFormat(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = small_config(Variant::Gp);
        let basis = config.basis().unwrap();
        let model = FittedModel::fit_curves(&curves(&mut rng, &basis), basis, &config).unwrap();
        let text = model.to_json().unwrap().replace("\"version\":1", "\"version\":99");
        assert!(matches!(FittedModel::from_json(&text), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn predicted_curves_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = small_config(Variant::LmgpS);
        let basis = config.basis().unwrap();
        let model = FittedModel::fit_curves(&curves(&mut rng, &basis), basis, &config).unwrap();
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        for z0 in 0..3 {
            for x0 in [0.0, 0.3, 0.77, 1.4] {
                let pred = model.predict_distribution(&[x0], z0, &grid).unwrap();
                assert!(pred.quantiles.windows(2).all(|w| w[1].1 >= w[0].1));
                assert_eq!(pred.outside_training_box, x0 > model.x.column(0).max() || x0 < model.x.column(0).min());
            }
        }
        assert!(matches!(model.predict_scores(&[0.5], 3), Err(Error::UnknownCategory(_))));
        assert!(matches!(model.category_index("d"), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn missing_category_in_training_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = small_config(Variant::Gp);
        let basis = config.basis().unwrap();
        let mut data = curves(&mut rng, &basis);
        data.categories.push("d".into());
        assert!(FittedModel::fit_curves(&data, basis, &config).is_err());
    }

    #[test]
    fn interpolates_training_curves_with_all_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = ISplineBasis::new(2, 3).unwrap();
        let mut data = curves(&mut rng, &basis);
        let keep: Vec<usize> = (0..data.z.len()).filter(|&i| data.z[i] == 0).collect();
        data = TrainingCurves {
            x: DMatrix::from_fn(keep.len(), 1, |i, _| data.x[(keep[i], 0)]),
            z: vec![0; keep.len()],
            categories: vec!["a".into()],
            fits: keep.iter().map(|&i| data.fits[i].clone()).collect(),
        };
        let config = ModelConfig {
            variant: Variant::Gp,
            order: 2,
            interior_knots: 3,
            selection: ComponentSelection::Fixed(basis.num_coefficients()),
            em: EmConfig {
                nugget: NuggetMode::Fixed(0.0),
                ..EmConfig::default()
            },
            ..ModelConfig::default()
        };
        let model = FittedModel::fit_curves(&data, basis.clone(), &config).unwrap();
        for i in 0..keep.len() {
            let x0 = [data.x[(i, 0)]];
            let pred = model.predict_fit(&x0, 0).unwrap();
            for (a, b) in pred.beta.iter().zip(&data.fits[i].beta) {
                assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", pred.beta, data.fits[i].beta);
            }
        }
    }
}
