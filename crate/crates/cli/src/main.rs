//! `distpred`: fit, query and evaluate distributional surrogate models from
//! long-format replicate CSV files.
//!
//! Exit codes: 0 on success, 2 for bad input (arguments, files, schema,
//! unknown categories), 3 when the numerics fail (singular or non-finite
//! quantities).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use distpred::curve::{eval_quantile, quantile_to_cdf};
use distpred::lmgp::{NuggetMode, Variant};
use distpred::model::{FittedModel, ModelConfig};
use distpred::pipeline::dataset::{load_dataset, preprocess, Dataset, Preprocessing, Schema};
use distpred::pipeline::evaluate::{evaluate, EvalConfig, Reference};
use distpred::pipeline::simulate::{simulate, SimulationSpec};
use distpred::pipeline::summary::{summary_stats, DEFAULT_PROBS};
use distpred::reduction::ComponentSelection;
use distpred::Error;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "distpred", version, about = "Distributional surrogate models for replicate data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a replicate CSV and write it as JSON.
    Fit(FitArgs),
    /// Predicted quantiles and CDF at new configurations.
    Predict(PredictArgs),
    /// Mean, standard deviation and quantiles at new configurations.
    Summary(SummaryArgs),
    /// Repeated train/test splits comparing model variants by EL1.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic replicate CSV from a TOML spec.
    Simulate(SimulateArgs),
}

/// Column roles, from flags or a TOML file.
#[derive(Args)]
struct SchemaArgs {
    /// TOML file with `numeric`, `categorical`, `outcome` and optionally
    /// `log2` and `outcome_scale`. Flags given alongside it take precedence.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    numeric: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    #[arg(long)]
    outcome: Option<String>,
    /// Numeric columns to transform with log₂ before modelling.
    #[arg(long, value_delimiter = ',')]
    log2: Vec<String>,
    /// Factor applied to every outcome value before modelling.
    #[arg(long)]
    outcome_scale: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    #[serde(default)]
    numeric: Vec<String>,
    #[serde(default)]
    categorical: Vec<String>,
    outcome: Option<String>,
    #[serde(default)]
    log2: Vec<String>,
    outcome_scale: Option<f64>,
}

#[derive(Args)]
struct CurveArgs {
    /// Interior knots of the I-spline basis.
    #[arg(long, default_value_t = 20)]
    knots: usize,
    /// Spline order.
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Number of retained SVD components.
    #[arg(long, conflicts_with = "svd_threshold")]
    dprime: Option<usize>,
    /// Keep the fewest components whose cumulative variance share reaches this.
    #[arg(long)]
    svd_threshold: Option<f64>,
    /// EM iteration cap per component.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Fix the nugget at this value instead of estimating it.
    #[arg(long)]
    nugget: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV, one row per replicate.
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, default_value = "lmgp-s", value_parser = parse_variant)]
    variant: Variant,
    #[command(flatten)]
    curve: CurveArgs,
    /// Where to write the fitted model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Model written by `fit`.
    model: PathBuf,
    /// Configurations as `name=value,...` (several separated by `;`), or a
    /// CSV file with one configuration per row.
    #[arg(long)]
    at: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Probabilities for the quantile table.
    #[arg(long, value_delimiter = ',')]
    probs: Vec<f64>,
    /// Outcome points per configuration in the CDF table.
    #[arg(long, default_value_t = 101)]
    grid: usize,
}

#[derive(Args)]
struct SummaryArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, value_delimiter = ',')]
    probs: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, value_delimiter = ',', default_value = "lmgp,lmgp-s,gp,cgp", value_parser = parse_variant)]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    train_props: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    curve: CurveArgs,
    /// Write the per-cell CSV here instead of after the table on stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML simulation spec.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Input(String),
    Core(Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(msg) => f.write_str(msg),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn input(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| input(format!("{}: {e}", path.display())))
}

impl SchemaArgs {
    fn resolve(&self) -> CliResult<(Schema, Preprocessing)> {
        let file: SchemaFile = match &self.schema {
            Some(path) => toml::from_str(&read_text(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?,
            None => SchemaFile::default(),
        };
        let pick = |flag: &Vec<String>, from_file: Vec<String>| if flag.is_empty() { from_file } else { flag.clone() };
        let schema = Schema {
            numeric: pick(&self.numeric, file.numeric),
            categorical: pick(&self.categorical, file.categorical),
            outcome: self
                .outcome
                .clone()
                .or(file.outcome)
                .ok_or_else(|| input("no outcome column given (--outcome or --schema)"))?,
        };
        if schema.numeric.is_empty() {
            return Err(input("no numeric input columns given (--numeric or --schema)"));
        }
        let log2 = pick(&self.log2, file.log2);
        let scale = self.outcome_scale.or(file.outcome_scale).unwrap_or(1.0);
        let prep = Preprocessing::log2_columns(&schema, &log2, scale)?;
        Ok((schema, prep))
    }

    fn load(&self, data: &Path) -> CliResult<Dataset> {
        let (schema, prep) = self.resolve()?;
        let raw = load_dataset(data, &schema)?;
        Ok(preprocess(&raw, &prep)?)
    }
}

impl CurveArgs {
    fn config(&self, variant: Variant) -> ModelConfig {
        let mut config = ModelConfig {
            variant,
            order: self.order,
            interior_knots: self.knots,
            ..ModelConfig::default()
        };
        if let Some(d) = self.dprime {
            config.selection = ComponentSelection::Fixed(d);
        }
        if let Some(t) = self.svd_threshold {
            config.selection = ComponentSelection::Threshold(t);
        }
        if let Some(n) = self.max_iter {
            config.em.max_iter = n;
        }
        if let Some(g) = self.nugget {
            config.em.nugget = NuggetMode::Fixed(g);
        }
        config
    }
}

/// One query point in raw input units.
struct Query {
    x: Vec<f64>,
    labels: Vec<String>,
}

fn model_schema(model: &FittedModel) -> CliResult<&Schema> {
    model
        .inputs
        .as_ref()
        .map(|rec| &rec.schema)
        .ok_or_else(|| input("model carries no column names; it was not fitted from a dataset"))
}

fn parse_queries(at: &str, schema: &Schema) -> CliResult<Vec<Query>> {
    let path = Path::new(at);
    if path.is_file() {
        return read_query_csv(path, schema);
    }
    at.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|point| {
            let pairs = point
                .split(',')
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim(), v.trim()))
                        .ok_or_else(|| input(format!("expected name=value, got {kv:?}")))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let lookup = |name: &str| {
                let mut hits = pairs.iter().filter(|(k, _)| *k == name);
                match (hits.next(), hits.next()) {
                    (Some((_, v)), None) => Ok(*v),
                    (None, _) => Err(input(format!("configuration {point:?} has no value for {name}"))),
                    _ => Err(input(format!("configuration {point:?} sets {name} twice"))),
                }
            };
            if let Some((k, _)) = pairs
                .iter()
                .find(|(k, _)| !schema.numeric.iter().chain(&schema.categorical).any(|c| c == k))
            {
                return Err(input(format!("unknown input {k:?}")));
            }
            let x = schema
                .numeric
                .iter()
                .map(|n| parse_number(lookup(n)?, n))
                .collect::<CliResult<Vec<_>>>()?;
            let labels = schema
                .categorical
                .iter()
                .map(|n| lookup(n).map(str::to_string))
                .collect::<CliResult<Vec<_>>>()?;
            Ok(Query { x, labels })
        })
        .collect::<CliResult<Vec<_>>>()
        .and_then(|qs| if qs.is_empty() { Err(input("no configurations given")) } else { Ok(qs) })
}

fn parse_number(raw: &str, name: &str) -> CliResult<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(input(format!("{name}: {raw:?} is not a finite number"))),
    }
}

fn read_query_csv(path: &Path, schema: &Schema) -> CliResult<Vec<Query>> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| input(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| input(format!("{}: missing column {name}", path.display())))
    };
    let num_cols = schema.numeric.iter().map(|n| column(n)).collect::<CliResult<Vec<_>>>()?;
    let cat_cols = schema.categorical.iter().map(|n| column(n)).collect::<CliResult<Vec<_>>>()?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let cell = |j: usize| {
                cells
                    .get(j)
                    .copied()
                    .ok_or_else(|| input(format!("{} line {}: too few fields", path.display(), i + 2)))
            };
            let x = num_cols
                .iter()
                .zip(&schema.numeric)
                .map(|(&j, n)| parse_number(cell(j)?, n))
                .collect::<CliResult<Vec<_>>>()?;
            let labels = cat_cols
                .iter()
                .map(|&j| cell(j).map(str::to_string))
                .collect::<CliResult<Vec<_>>>()?;
            Ok(Query { x, labels })
        })
        .collect()
}

/// Leading CSV columns naming the configuration.
fn describe(schema: &Schema) -> String {
    let mut cols = vec!["config".to_string()];
    cols.extend(schema.numeric.iter().cloned());
    cols.extend(schema.categorical.iter().cloned());
    cols.join(",")
}

fn describe_row(i: usize, q: &Query) -> String {
    let mut cells = vec![i.to_string()];
    cells.extend(q.x.iter().map(|v| v.to_string()));
    cells.extend(q.labels.iter().cloned());
    cells.join(",")
}

fn outcome_scale(model: &FittedModel) -> f64 {
    model.inputs.as_ref().map_or(1.0, |rec| rec.preprocessing.outcome_scale)
}

fn check_probs(probs: &[f64]) -> CliResult<Vec<f64>> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(input(format!("probability {p} outside [0, 1]")));
    }
    Ok(if probs.is_empty() { DEFAULT_PROBS.to_vec() } else { probs.to_vec() })
}

fn warn_outside(model: &FittedModel, i: usize, x: &[f64]) {
    if model.outside_training_box(x) {
        eprintln!("warning: configuration {i} lies outside the training input box; the prediction extrapolates");
    }
}

fn run_fit(args: &FitArgs) -> CliResult<()> {
    let dataset = args.schema.load(&args.data)?;
    let start = Instant::now();
    let model = FittedModel::fit(&dataset, &args.curve.config(args.variant))?;
    model.save(&args.out)?;
    eprintln!(
        "fitted {} on {} configurations in {} categories: d' = {}, {:.2}s",
        model.variant,
        dataset.len(),
        model.categories.len(),
        model.dprime(),
        start.elapsed().as_secs_f64()
    );
    for (j, c) in model.components.iter().enumerate() {
        if !c.converged {
            eprintln!("warning: component {j} stopped after {} EM iterations without converging", c.iterations);
        }
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> CliResult<()> {
    let model = FittedModel::load(&args.query.model)?;
    let schema = model_schema(&model)?;
    let queries = parse_queries(&args.query.at, schema)?;
    let probs = check_probs(&args.probs)?;
    if args.grid == 0 {
        return Err(input("--grid must be positive"));
    }
    let scale = outcome_scale(&model);
    let head = describe(schema);
    let mut quantiles = format!("{head},p,quantile\n");
    let mut cdf = format!("{head},y,cdf\n");
    for (i, q) in queries.iter().enumerate() {
        let (x, z) = model.encode(&q.x, &q.labels)?;
        warn_outside(&model, i, &x);
        let pred = model.predict_distribution(&x, z, &probs)?;
        let row = describe_row(i, q);
        for (p, v) in &pred.quantiles {
            quantiles.push_str(&format!("{row},{p},{}\n", v / scale));
        }
        let (lo, hi) = pred.fit.range();
        let ys: Vec<f64> = if args.grid == 1 || hi <= lo {
            vec![lo]
        } else {
            (0..args.grid)
                .map(|k| lo + (hi - lo) * k as f64 / (args.grid - 1) as f64)
                .collect()
        };
        for (y, f) in quantile_to_cdf(&pred.fit, &model.basis, &ys) {
            cdf.push_str(&format!("{row},{},{f}\n", y / scale));
        }
    }
    print!("{quantiles}\n{cdf}");
    Ok(())
}

fn run_summary(args: &SummaryArgs) -> CliResult<()> {
    let model = FittedModel::load(&args.query.model)?;
    let schema = model_schema(&model)?;
    let queries = parse_queries(&args.query.at, schema)?;
    let probs = check_probs(&args.probs)?;
    let scale = outcome_scale(&model);
    let mut out = describe(schema) + ",mean,sd";
    for p in &probs {
        out.push_str(&format!(",q{p}"));
    }
    out.push('\n');
    for (i, q) in queries.iter().enumerate() {
        let (x, z) = model.encode(&q.x, &q.labels)?;
        warn_outside(&model, i, &x);
        let fit = model.predict_fit(&x, z)?;
        let stats = summary_stats(&fit, &model.basis, &probs)?;
        out.push_str(&format!("{},{},{}", describe_row(i, q), stats.mean / scale, stats.sd / scale));
        for &p in &probs {
            out.push_str(&format!(",{}", eval_quantile(&fit, &model.basis, p)? / scale));
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let dataset = args.schema.load(&args.data)?;
    let config = EvalConfig {
        variants: args.variants.clone(),
        train_proportions: args.train_props.clone(),
        repeats: args.repeats,
        seed: args.seed,
        model: args.curve.config(args.variants.first().copied().unwrap_or(Variant::LmgpS)),
        reference: Reference::Smoothed,
    };
    let start = Instant::now();
    let report = evaluate(&dataset, &config)?;
    eprintln!(
        "evaluated {} variants x {} proportions x {} repeats in {:.2}s",
        config.variants.len(),
        config.train_proportions.len(),
        config.repeats,
        start.elapsed().as_secs_f64()
    );
    print!("{}", report.to_table());
    match &args.csv {
        Some(path) => write_text(path, &report.to_csv())?,
        None => print!("\n{}", report.to_csv()),
    }
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let text = read_text(&args.spec)?;
    let spec: SimulationSpec =
        toml::from_str(&text).map_err(|e| input(format!("{}: {e}", args.spec.display())))?;
    let sim = simulate(&spec, args.seed)?;
    let mut buf = Vec::new();
    sim.dataset.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|e| input(e.to_string()))?;
    match &args.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Summary(a) => run_summary(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
