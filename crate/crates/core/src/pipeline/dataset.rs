//! Long-format replicate data: one CSV row per measurement, grouped into
//! configurations and sorted by category.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curve::ReplicateSample;
use crate::error::{Error, Result};

/// Separator between the labels of several categorical factors in a combined
/// category name.
pub const LABEL_SEPARATOR: &str = "|";

/// Which CSV columns play which role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub outcome: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Log2,
}

impl Transform {
    pub fn apply(self, v: f64, column: &str) -> Result<f64> {
        match self {
            Transform::Identity => Ok(v),
            Transform::Log2 if v > 0.0 => Ok(v.log2()),
            Transform::Log2 => Err(Error::invalid(format!(
                "log2 of nonpositive value {v} in column {column}"
            ))),
        }
    }
}

/// Input transforms and outcome rescaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// One per numeric column.
    pub transforms: Vec<Transform>,
    /// Outcomes are multiplied by this (e.g. `1e-7` for the 10⁷ KB/s scale).
    pub outcome_scale: f64,
}

impl Preprocessing {
    pub fn identity(p: usize) -> Self {
        Self {
            transforms: vec![Transform::Identity; p],
            outcome_scale: 1.0,
        }
    }

    /// `log2` on the named columns, identity elsewhere.
    pub fn log2_columns(schema: &Schema, columns: &[String], outcome_scale: f64) -> Result<Self> {
        for c in columns {
            if !schema.numeric.contains(c) {
                return Err(Error::invalid(format!("log2 column {c} is not a numeric input")));
            }
        }
        Ok(Self {
            transforms: schema
                .numeric
                .iter()
                .map(|n| if columns.contains(n) { Transform::Log2 } else { Transform::Identity })
                .collect(),
            outcome_scale,
        })
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.transforms.len() != schema.numeric.len() {
            return Err(Error::dims(format!(
                "{} transforms for {} numeric columns",
                self.transforms.len(),
                schema.numeric.len()
            )));
        }
        if !(self.outcome_scale > 0.0) || !self.outcome_scale.is_finite() {
            return Err(Error::invalid("outcome scale must be positive"));
        }
        Ok(())
    }

    /// Maps a raw numeric input vector to model scale.
    pub fn transform_inputs(&self, schema: &Schema, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.transforms.len() {
            return Err(Error::dims(format!(
                "expected {} numeric inputs, got {}",
                self.transforms.len(),
                raw.len()
            )));
        }
        raw.iter()
            .zip(&self.transforms)
            .zip(&schema.numeric)
            .map(|((&v, t), name)| t.apply(v, name))
            .collect()
    }
}

/// One configuration: numeric inputs and categorical labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub x: Vec<f64>,
    pub z: Vec<String>,
}

impl ConfigPoint {
    /// Combined label of all categorical factors.
    pub fn category(&self) -> String {
        self.z.join(LABEL_SEPARATOR)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    /// Category-sorted, one entry per distinct configuration.
    pub configs: Vec<ConfigPoint>,
    pub samples: Vec<ReplicateSample>,
    /// Transforms already applied to `configs` and `samples`, if any.
    pub preprocessing: Option<Preprocessing>,
}

fn config_order(a: &ConfigPoint, b: &ConfigPoint) -> std::cmp::Ordering {
    a.z.cmp(&b.z).then_with(|| {
        a.x.iter()
            .zip(&b.x)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Hashable key with exact float identity.
fn config_key(c: &ConfigPoint) -> (Vec<String>, Vec<u64>) {
    (c.z.clone(), c.x.iter().map(|v| v.to_bits()).collect())
}

impl Dataset {
    /// Groups replicate rows by configuration and sorts by `(z, x)`.
    pub fn from_rows(schema: Schema, rows: impl IntoIterator<Item = (ConfigPoint, f64)>) -> Result<Self> {
        let mut groups: BTreeMap<(Vec<String>, Vec<u64>), (ConfigPoint, Vec<f64>)> = BTreeMap::new();
        for (config, y) in rows {
            if config.x.len() != schema.numeric.len() || config.z.len() != schema.categorical.len() {
                return Err(Error::dims("row does not match the schema"));
            }
            groups
                .entry(config_key(&config))
                .or_insert_with(|| (config, Vec::new()))
                .1
                .push(y);
        }
        if groups.is_empty() {
            return Err(Error::invalid("dataset has no rows"));
        }
        let mut pairs: Vec<(ConfigPoint, Vec<f64>)> = groups.into_values().collect();
        pairs.sort_by(|a, b| config_order(&a.0, &b.0));
        let mut configs = Vec::with_capacity(pairs.len());
        let mut samples = Vec::with_capacity(pairs.len());
        for (c, ys) in pairs {
            configs.push(c);
            samples.push(ReplicateSample::new(ys)?);
        }
        Ok(Self {
            schema,
            configs,
            samples,
            preprocessing: None,
        })
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Replicate counts `m_i`.
    pub fn replicate_counts(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.len()).collect()
    }

    /// Distinct combined category labels in sorted order.
    pub fn categories(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.configs.iter().map(|c| c.category()).collect();
        labels.dedup();
        labels
    }

    /// Category index of every configuration (nondecreasing).
    pub fn category_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut k = 0;
        for (i, c) in self.configs.iter().enumerate() {
            if i > 0 && c.z != self.configs[i - 1].z {
                k += 1;
            }
            out.push(k);
        }
        out
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        let p = self.schema.numeric.len();
        DMatrix::from_fn(self.len(), p, |i, j| self.configs[i].x[j])
    }

    /// The configurations at `rows` (kept in the given order).
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            configs: rows.iter().map(|&i| self.configs[i].clone()).collect(),
            samples: rows.iter().map(|&i| self.samples[i].clone()).collect(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    /// Writes one CSV row per replicate.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.schema.numeric.iter().map(String::as_str).collect();
        header.extend(self.schema.categorical.iter().map(String::as_str));
        header.push(&self.schema.outcome);
        writer.write_record(&header)?;
        for (c, s) in self.configs.iter().zip(&self.samples) {
            for y in s.values() {
                let mut rec: Vec<String> = c.x.iter().map(|v| v.to_string()).collect();
                rec.extend(c.z.iter().cloned());
                rec.push(y.to_string());
                writer.write_record(&rec)?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

/// Reads a long-format CSV with a header row.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(input: R, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let numeric: Vec<usize> = schema.numeric.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let categorical: Vec<usize> = schema.categorical.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let outcome = find(&schema.outcome)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |idx: usize, name: &str| {
            record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing value for {name}"),
            })
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = cell(idx, name)?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    message: format!("column {name}: {raw:?} is not a finite number"),
                }),
            }
        };
        let x = numeric
            .iter()
            .zip(&schema.numeric)
            .map(|(&i, n)| number(i, n))
            .collect::<Result<Vec<_>>>()?;
        let z = categorical
            .iter()
            .zip(&schema.categorical)
            .map(|(&i, n)| {
                let v = cell(i, n)?;
                if v.is_empty() {
                    Err(Error::Parse {
                        line,
                        message: format!("column {n}: empty category label"),
                    })
                } else {
                    Ok(v.to_string())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let y = number(outcome, &schema.outcome)?;
        rows.push((ConfigPoint { x, z }, y));
    }
    Dataset::from_rows(schema.clone(), rows)
}

/// Applies input transforms and outcome scaling; records them on the result.
pub fn preprocess(dataset: &Dataset, prep: &Preprocessing) -> Result<Dataset> {
    if dataset.preprocessing.is_some() {
        return Err(Error::invalid("dataset is already preprocessed"));
    }
    prep.validate(&dataset.schema)?;
    let rows = dataset
        .configs
        .iter()
        .zip(&dataset.samples)
        .map(|(c, s)| {
            let x = prep.transform_inputs(&dataset.schema, &c.x)?;
            Ok(s.values()
                .iter()
                .map(|y| {
                    (
                        ConfigPoint { x: x.clone(), z: c.z.clone() },
                        y * prep.outcome_scale,
                    )
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Dataset::from_rows(dataset.schema.clone(), rows.into_iter().flatten())?;
    out.preprocessing = Some(prep.clone());
    Ok(out)
}
