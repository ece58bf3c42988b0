//! Command-line front end: configuration, data ingestion, subcommands and
//! run manifests.
//!
//! Configuration is resolved as defaults, then the TOML file given with
//! `--config`, then `--set key.path=value` overrides and dedicated flags. A
//! manifest written by any earlier run is itself a valid `--config` file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bandwidth::GridSpec;
use crate::datagen::{GeneratorKind, GeneratorSpec, DEFAULT_BURN_IN};
use crate::error::Error;
use crate::evaluation::{
    intervals_csv, prepare_trial, run_benchmark, run_pipeline, BenchConfig, DataSource, HistorySource, Method,
    PreparedTrial, SplitRatio, DEFAULT_ACI_GAMMA, DEFAULT_ROLLING_WINDOW,
};
use crate::kernels::KernelFamily;
use crate::pipeline::{BandwidthPolicy, PipelineConfig, ResidualEngine, DEFAULT_BETA_STEP};
use crate::predictor::{ForestParams, PredictorKind, PredictorSpec};
use crate::window::WindowPolicy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

/// Maps a library error onto a config key path where the parameter is one
/// the user sets, and onto a data error otherwise.
fn from_lib(err: Error) -> CliError {
    let key = match &err {
        Error::InvalidParameter { name, .. } => match *name {
            "alpha" | "beta_step" | "seeds" | "methods" | "rolling_window" => Some(name.to_string()),
            "gamma" => Some("aci_gamma".into()),
            "candidates" | "p_threshold" | "cv_validation" => Some(format!("window.{name}")),
            "bandwidth" => Some("kernel.bandwidth".into()),
            "grid" => Some("kernel.grid_count".into()),
            "reselect_every" => Some("kernel.reselect_every".into()),
            "lags" | "ridge" | "trees" | "min_leaf" | "max_features" => Some(format!("predictor.{name}")),
            "length" | "sigma" | "phi" => Some(format!("input.{name}")),
            _ => None,
        },
        Error::WindowOutOfRange { .. } => Some("window".into()),
        _ => None,
    };
    match key {
        Some(key) => CliError::Config {
            key,
            reason: err.to_string(),
        },
        None => CliError::Data(err.to_string()),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Configuration

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputConfig {
    Csv {
        path: PathBuf,
    },
    Generator {
        generator: GeneratorName,
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phi: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorName {
    HeteroMixture,
    NonstationarySeasonal,
    Ar1,
}

fn default_length() -> usize {
    2000
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Generator {
            generator: GeneratorName::NonstationarySeasonal,
            length: default_length(),
            burn_in: DEFAULT_BURN_IN,
            phi: None,
            sigma: None,
        }
    }
}

impl InputConfig {
    fn generator_spec(&self) -> Result<Option<GeneratorSpec>, CliError> {
        let InputConfig::Generator {
            generator,
            length,
            burn_in,
            phi,
            sigma,
        } = self
        else {
            return Ok(None);
        };
        let kind = match generator {
            GeneratorName::HeteroMixture => GeneratorKind::HeteroMixture,
            GeneratorName::NonstationarySeasonal => GeneratorKind::NonstationarySeasonal,
            GeneratorName::Ar1 => GeneratorKind::Ar1 {
                phi: phi.ok_or_else(|| CliError::config("input.phi", "required for the ar1 generator"))?,
                sigma: sigma.ok_or_else(|| CliError::config("input.sigma", "required for the ar1 generator"))?,
            },
        };
        let spec = GeneratorSpec {
            kind,
            length: *length,
            burn_in: *burn_in,
        };
        spec.validate().map_err(from_lib)?;
        Ok(Some(spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Fixed bandwidth; when absent the bandwidth is chosen by AIC.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub grid_count: usize,
    pub grid_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reselect_every: Option<usize>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            family: KernelFamily::default(),
            bandwidth: None,
            grid_count: grid.count,
            grid_factor: grid.factor,
            reselect_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorName {
    RandomForest,
    LagLeastSquares,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorName,
    /// Lag count; defaults to the fixed window length, or 10 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lags: Option<usize>,
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
    pub ridge: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let forest = ForestParams::default();
        Self {
            kind: PredictorName::RandomForest,
            lags: None,
            trees: forest.trees,
            max_depth: forest.max_depth,
            min_leaf: forest.min_leaf,
            max_features: None,
            ridge: 0.0,
            path: None,
        }
    }
}

pub const DEFAULT_PREDICTOR_LAGS: usize = 10;

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta_step: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub rolling_window: usize,
    pub aci_gamma: f64,
    pub history: HistorySource,
    /// Residuals scored by window cross-validation; defaults to the tuning
    /// split when the history includes training residuals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_validation: Option<usize>,
    /// Write per-step interval traces for every method and seed.
    pub traces: bool,
    pub split: SplitRatio,
    pub input: InputConfig,
    pub window: WindowPolicy,
    pub kernel: KernelConfig,
    pub predictor: PredictorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_step: DEFAULT_BETA_STEP,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            methods: Method::ALL.to_vec(),
            rolling_window: DEFAULT_ROLLING_WINDOW,
            aci_gamma: DEFAULT_ACI_GAMMA,
            history: HistorySource::default(),
            cv_validation: None,
            traces: false,
            split: SplitRatio::default(),
            input: InputConfig::default(),
            window: WindowPolicy::Fixed { w: 10 },
            kernel: KernelConfig::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config or manifest document. A manifest's `[config]` table is
    /// used when present.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config("<file>", e.message().to_string()))?;
        Self::from_table(unwrap_manifest(table))
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let text = toml::to_string(&table).map_err(|e| CliError::Runtime(e.to_string()))?;
        toml::from_str::<RunConfig>(&text).map_err(|e| {
            let key = e
                .span()
                .map(|span| key_at(&text, span.start))
                .unwrap_or_else(|| "<root>".to_string());
            CliError::config(key, e.message().to_string())
        })
    }

    pub fn predictor_lags(&self) -> usize {
        self.predictor.lags.unwrap_or(match self.window {
            WindowPolicy::Fixed { w } => w,
            _ => DEFAULT_PREDICTOR_LAGS,
        })
    }

    pub fn predictor_spec(&self) -> Result<PredictorSpec, CliError> {
        let p = &self.predictor;
        let kind = match p.kind {
            PredictorName::RandomForest => PredictorKind::RandomForest(ForestParams {
                trees: p.trees,
                max_depth: p.max_depth,
                min_leaf: p.min_leaf,
                max_features: p.max_features,
            }),
            PredictorName::LagLeastSquares => PredictorKind::LagLeastSquares { ridge: p.ridge },
            PredictorName::External => PredictorKind::External {
                path: p
                    .path
                    .clone()
                    .ok_or_else(|| CliError::config("predictor.path", "required for an external predictor"))?,
            },
        };
        let spec = PredictorSpec {
            kind,
            lags: self.predictor_lags(),
        };
        spec.validate().map_err(from_lib)?;
        Ok(spec)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let bandwidth = match self.kernel.bandwidth {
            Some(h) => BandwidthPolicy::Fixed(h),
            None => BandwidthPolicy::Aic {
                grid: GridSpec {
                    count: self.kernel.grid_count,
                    factor: self.kernel.grid_factor,
                },
                reselect_every: self.kernel.reselect_every,
            },
        };
        Ok(PipelineConfig {
            alpha: self.alpha,
            history: None,
            window: self.window.clone(),
            kernel: self.kernel.family,
            bandwidth,
            beta_step: self.beta_step,
            cv_validation: self.cv_validation,
            reweighting: Default::default(),
        })
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::config("alpha", "must lie in (0, 1)"));
        }
        crate::pipeline::beta_grid(self.alpha, self.beta_step)
            .map_err(|e| CliError::config("beta_step", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "must list at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(CliError::config("methods", "must list at least one method"));
        }
        if self.rolling_window == 0 {
            return Err(CliError::config("rolling_window", "must be at least 1"));
        }
        if !(self.aci_gamma >= 0.0 && self.aci_gamma.is_finite()) {
            return Err(CliError::config("aci_gamma", "must be finite and nonnegative"));
        }
        let s = self.split;
        if !(s.train > 0.0 && s.tune > 0.0 && s.train + s.tune < 1.0) {
            return Err(CliError::config("split", "need train > 0, tune > 0 and train + tune < 1"));
        }
        match &self.window {
            WindowPolicy::Fixed { w } if *w == 0 => return Err(CliError::config("window.w", "must be at least 1")),
            WindowPolicy::Cv { candidates } | WindowPolicy::Adaptive { candidates, .. } => {
                if candidates.is_empty() || candidates.contains(&0) {
                    return Err(CliError::config("window.candidates", "must be nonempty and positive"));
                }
                if candidates.windows(2).any(|p| p[0] >= p[1]) {
                    return Err(CliError::config("window.candidates", "must be strictly increasing"));
                }
            }
            _ => {}
        }
        if let WindowPolicy::Adaptive { p_threshold, .. } = self.window {
            if !(p_threshold > 0.0 && p_threshold < 1.0) {
                return Err(CliError::config("window.p_threshold", "must lie in (0, 1)"));
            }
        }
        if let Some(h) = self.kernel.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::config("kernel.bandwidth", "must be positive and finite"));
            }
        }
        if self.kernel.grid_count == 0 {
            return Err(CliError::config("kernel.grid_count", "must be at least 1"));
        }
        if !(self.kernel.grid_factor >= 1.0 && self.kernel.grid_factor.is_finite()) {
            return Err(CliError::config("kernel.grid_factor", "must be finite and at least 1"));
        }
        if self.kernel.reselect_every == Some(0) {
            return Err(CliError::config("kernel.reselect_every", "must be at least 1"));
        }
        if self.cv_validation == Some(0) {
            return Err(CliError::config("cv_validation", "must be at least 1"));
        }
        self.predictor_spec()?;
        self.input.generator_spec()?;
        Ok(())
    }
}

/// Returns the `[config]` table of a manifest, or the table itself.
fn unwrap_manifest(mut table: toml::Table) -> toml::Table {
    if table.contains_key("version") {
        if let Some(toml::Value::Table(config)) = table.remove("config") {
            return config;
        }
    }
    table
}

/// Dotted key path of the innermost key whose definition precedes `offset`
/// in a serialized TOML document.
fn key_at(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut last_key = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            section = name.trim_matches(|c| c == '[' || c == ']').to_string();
            last_key = None;
        } else if let Some((k, _)) = trimmed.split_once('=') {
            last_key = Some(k.trim().trim_matches('"').to_string());
        }
        pos += line.len();
    }
    match (section.is_empty(), last_key) {
        (true, Some(k)) => k,
        (false, Some(k)) => format!("{section}.{k}"),
        (false, None) => section,
        (true, None) => "<root>".to_string(),
    }
}

/// Applies `key.path=value`; the value is read as a TOML literal and falls
/// back to a plain string.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "expected key=value"))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(CliError::config(assignment, "empty key"));
    }
    let value = parse_value(raw.trim());
    set_path(table, path, value)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cursor = table;
    for (i, part) in parts.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(CliError::config(
                    parts[..=i].join("."),
                    "is not a table and cannot hold nested keys",
                ))
            }
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// Data ingestion

/// Reads column `y` (and validates an optional column `t`) from a CSV file
/// with a header row.
pub fn ingest_csv(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let y_col = col("y").ok_or_else(|| CliError::Data(format!("{}: missing column `y`", path.display())))?;
    let t_col = col("t");
    let mut values = Vec::new();
    let mut last_t: Option<f64> = None;
    for (k, record) in reader.records().enumerate() {
        // header is row 1
        let row = k + 2;
        let record = record.map_err(|e| CliError::Data(format!("{}: row {row}: {e}", path.display())))?;
        let cell = record.get(y_col).unwrap_or("").trim();
        let y: f64 = cell
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CliError::Data(format!("{}: row {row}: `y` value {cell:?} is not a finite number", path.display())))?;
        if let Some(tc) = t_col {
            let cell = record.get(tc).unwrap_or("").trim();
            let t: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::Data(format!("{}: row {row}: `t` value {cell:?} is not a number", path.display())))?;
            if let Some(prev) = last_t {
                if t <= prev {
                    return Err(CliError::Data(format!(
                        "{}: row {row}: `t` is not strictly increasing ({t} after {prev})",
                        path.display()
                    )));
                }
            }
            last_t = Some(t);
        }
        values.push(y);
    }
    if values.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(values)
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "kowcpi", version, about = "Sequential conformal prediction intervals for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream the test split through KOWCPI and write `intervals.csv`.
    Predict(CommonArgs),
    /// Run every configured method over every seed and write the results table.
    Bench(CommonArgs),
    /// Write a synthetic series as `t,y` CSV.
    Generate(CommonArgs),
    /// Report the bandwidth AIC curve and the window selection.
    Tune(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Predict(_) => "predict",
            Command::Bench(_) => "bench",
            Command::Generate(_) => "generate",
            Command::Tune(_) => "tune",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Predict(a) | Command::Bench(a) | Command::Generate(a) | Command::Tune(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file or a manifest from an earlier run.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set window.w=12` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Read the series from this CSV file (column `y`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use a synthetic generator: hetero-mixture, nonstationary-seasonal or ar1.
    #[arg(long)]
    pub generator: Option<String>,
    /// Generated series length.
    #[arg(long)]
    pub length: Option<usize>,
    /// Miscoverage level; intervals target coverage `1 - alpha`
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed window length.
    #[arg(long)]
    pub window: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Directory for the outputs and `manifest.toml` (created if missing)
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl CommonArgs {
    /// Resolves defaults, file, `--set` overrides and flags, in that order.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut table = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| CliError::config("--config", format!("{}: {}", path.display(), e.message())))?;
                unwrap_manifest(table)
            }
            None => toml::Table::new(),
        };
        for s in &self.set {
            apply_set(&mut table, s)?;
        }
        fill_input_defaults(&mut table)?;
        if let Some(path) = &self.input {
            let mut input = toml::Table::new();
            input.insert("source".into(), "csv".into());
            input.insert("path".into(), path.display().to_string().into());
            table.insert("input".into(), input.into());
        }
        if let Some(g) = &self.generator {
            let keep_source = matches!(
                table.get("input").and_then(|i| i.get("source")).and_then(|s| s.as_str()),
                Some("generator")
            );
            if !keep_source {
                table.insert("input".into(), toml::Table::new().into());
            }
            set_path(&mut table, "input.source", "generator".into())?;
            set_path(&mut table, "input.generator", g.as_str().into())?;
        }
        if let Some(n) = self.length {
            set_path(&mut table, "input.length", toml::Value::Integer(to_i64(n, "input.length")?))?;
            fill_input_defaults(&mut table)?;
        }
        if let Some(a) = self.alpha {
            table.insert("alpha".into(), a.into());
        }
        if let Some(w) = self.window {
            let mut window = toml::Table::new();
            window.insert("mode".into(), "fixed".into());
            window.insert("w".into(), toml::Value::Integer(to_i64(w, "window.w")?));
            table.insert("window".into(), window.into());
        }
        if let Some(seeds) = &self.seeds {
            let arr = seeds
                .iter()
                .map(|&s| i64::try_from(s).map(toml::Value::Integer))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::config("seeds", "seed exceeds the TOML integer range"))?;
            table.insert("seeds".into(), arr.into());
        }
        if let Some(dir) = &self.output_dir {
            table.insert("output_dir".into(), dir.display().to_string().into());
        }
        let config = RunConfig::from_table(table)?;
        config.validate()?;
        Ok(config)
    }
}

/// A partial `input` table without `source` (for example from
/// `--set input.phi=0.5`) is completed from the default input.
fn fill_input_defaults(table: &mut toml::Table) -> Result<(), CliError> {
    let Some(toml::Value::Table(input)) = table.get_mut("input") else {
        return Ok(());
    };
    if input.contains_key("source") {
        return Ok(());
    }
    let defaults = toml::Table::try_from(InputConfig::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (key, value) in defaults {
        input.entry(key).or_insert(value);
    }
    Ok(())
}

fn to_i64(n: usize, key: &str) -> Result<i64, CliError> {
    i64::try_from(n).map_err(|_| CliError::config(key, "value too large"))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCoefficients {
    pub seed: u64,
    pub beta: Vec<f64>,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<SeedCoefficients>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, coefficients: Vec<SeedCoefficients>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seeds: config.seeds.clone(),
            config: config.clone(),
            coefficients,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Subcommands

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("kowcpi: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let config = command.args().resolve()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let coefficients = match command {
        Command::Predict(_) => cmd_predict(&config)?,
        Command::Bench(_) => cmd_bench(&config)?,
        Command::Generate(_) => cmd_generate(&config)?,
        Command::Tune(_) => cmd_tune(&config)?,
    };
    let manifest = Manifest::new(command.name(), &config, coefficients);
    write(&config.output_dir.join(MANIFEST_FILE), &manifest.to_toml()?)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn data_source(config: &RunConfig) -> Result<DataSource, CliError> {
    match &config.input {
        InputConfig::Csv { path } => Ok(DataSource::Series(ingest_csv(path)?)),
        other => Ok(DataSource::Generator(
            other.generator_spec()?.expect("non-csv input is a generator"),
        )),
    }
}

fn bench_config(config: &RunConfig) -> Result<BenchConfig, CliError> {
    Ok(BenchConfig {
        source: data_source(config)?,
        predictor: config.predictor_spec()?,
        pipeline: config.pipeline_config()?,
        methods: config.methods.clone(),
        aci_gamma: config.aci_gamma,
        rolling_window: config.rolling_window,
        split: config.split,
        history: config.history,
    })
}

fn coefficients_of(seed: u64, trial: &PreparedTrial) -> Vec<SeedCoefficients> {
    if trial.coefficients.is_empty() {
        Vec::new()
    } else {
        vec![SeedCoefficients {
            seed,
            beta: trial.coefficients.clone(),
        }]
    }
}

/// Pipeline config as the benchmark runs it on `trial`.
fn trial_pipeline(bench: &BenchConfig, trial: &PreparedTrial) -> PipelineConfig {
    let mut p = bench.pipeline.clone();
    if bench.history == HistorySource::TrainAndTune && p.cv_validation.is_none() {
        p.cv_validation = Some(trial.calibration.len());
    }
    p
}

fn cmd_predict(config: &RunConfig) -> Result<Vec<SeedCoefficients>, CliError> {
    let bench = bench_config(config)?;
    let seed = config.seeds[0];
    let trial = prepare_trial(&bench, seed).map_err(from_lib)?;
    let pipeline = trial_pipeline(&bench, &trial);
    let (report, _) = run_pipeline(
        &pipeline,
        &trial.history(bench.history),
        &trial.stream,
        Method::Kowcpi,
        config.rolling_window,
    )
    .map_err(from_lib)?;
    write(&config.output_dir.join("intervals.csv"), &intervals_csv(&report.per_step))?;
    Ok(coefficients_of(seed, &trial))
}

fn cmd_bench(config: &RunConfig) -> Result<Vec<SeedCoefficients>, CliError> {
    let bench = bench_config(config)?;
    let table = run_benchmark(&bench, &config.seeds).map_err(from_lib)?;
    let dir = &config.output_dir;
    write(&dir.join("results.csv"), &table.to_csv())?;
    write(&dir.join("trials.csv"), &table.trials_csv())?;
    let json = serde_json::json!({
        "rows": table.rows,
        "trials": table.trials,
        "metadata": {
            "alpha": config.alpha,
            "rolling_window": config.rolling_window,
            "aci_gamma": config.aci_gamma,
            "beta_step": config.beta_step,
            "seeds": config.seeds,
        },
    });
    let json = serde_json::to_string_pretty(&json).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join("results.json"), &(json + "\n"))?;
    if config.traces {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces).map_err(|e| io_err(&traces, e))?;
        for (seed, report) in &table.reports {
            let name = format!("{}_seed{seed}.csv", report.method.name());
            write(&traces.join(name), &intervals_csv(&report.per_step))?;
        }
    }
    Ok(table
        .coefficients
        .into_iter()
        .map(|(seed, beta)| SeedCoefficients { seed, beta })
        .collect())
}

fn cmd_generate(config: &RunConfig) -> Result<Vec<SeedCoefficients>, CliError> {
    let spec = config
        .input
        .generator_spec()?
        .ok_or_else(|| CliError::config("input.source", "generate needs a generator input"))?;
    let mut coefficients = Vec::new();
    for &seed in &config.seeds {
        let g = spec.generate(seed).map_err(from_lib)?;
        let mut out = String::from("t,y\n");
        for (t, y) in g.values.iter().enumerate() {
            out.push_str(&format!("{t},{y}\n"));
        }
        let name = if config.seeds.len() == 1 {
            "series.csv".to_string()
        } else {
            format!("series_seed{seed}.csv")
        };
        write(&config.output_dir.join(name), &out)?;
        if !g.coefficients.is_empty() {
            coefficients.push(SeedCoefficients {
                seed,
                beta: g.coefficients,
            });
        }
    }
    Ok(coefficients)
}

fn cmd_tune(config: &RunConfig) -> Result<Vec<SeedCoefficients>, CliError> {
    let bench = bench_config(config)?;
    let seed = config.seeds[0];
    let trial = prepare_trial(&bench, seed).map_err(from_lib)?;
    let pipeline = trial_pipeline(&bench, &trial);
    let history = trial.history(bench.history);
    let dir = &config.output_dir;

    if let WindowPolicy::Adaptive { .. } = pipeline.window {
        // warm on everything before the validation block, then record the
        // window chosen at each validation step
        let validation = pipeline
            .cv_validation
            .unwrap_or(history.len() - history.len() / 2)
            .min(history.len().saturating_sub(1));
        let (warm, tail) = history.split_at(history.len() - validation);
        let mut engine = ResidualEngine::new(pipeline.clone(), warm).map_err(from_lib)?;
        let mut trace = String::from("step,w\n");
        for (k, &e) in tail.iter().enumerate() {
            trace.push_str(&format!("{k},{}\n", engine.current_window().map_err(from_lib)?));
            engine.push(e).map_err(from_lib)?;
        }
        write(&dir.join("tune_adaptive.csv"), &trace)?;
    }

    let engine = ResidualEngine::new(pipeline, &history).map_err(from_lib)?;
    let tuning = engine.tuning();
    let mut aic = String::from("w,bandwidth,aic,trace,rss,selected\n");
    let mut selected = BTreeMap::new();
    for (w, sel) in &tuning.bandwidths {
        selected.insert(*w, sel.kernel.bandwidth);
        for p in &sel.curve {
            let value = p.aic.map(|a| a.to_string()).unwrap_or_default();
            let chosen = u8::from(p.bandwidth == sel.kernel.bandwidth);
            aic.push_str(&format!("{w},{},{value},{},{},{chosen}\n", p.bandwidth, p.trace_sst, p.rss));
        }
        if !sel.curve.iter().any(|p| p.bandwidth == sel.kernel.bandwidth) {
            aic.push_str(&format!("{w},{},,,,1\n", sel.kernel.bandwidth));
        }
    }
    if let BandwidthPolicy::Fixed(h) = engine.config().bandwidth {
        for w in engine_windows(&engine) {
            aic.push_str(&format!("{w},{h},,,,1\n"));
            selected.insert(w, h);
        }
    }
    write(&dir.join("tune_aic.csv"), &aic)?;
    if let Some(cv) = &tuning.cv {
        let mut out = String::from("w,coverage,mean_width,selected\n");
        for s in &cv.table {
            out.push_str(&format!("{},{},{},{}\n", s.w, s.coverage, s.mean_width, u8::from(s.w == cv.w)));
        }
        write(&dir.join("tune_cv.csv"), &out)?;
    }
    let summary = serde_json::json!({
        "window": tuning.window,
        "bandwidths": selected,
        "cv": tuning.cv,
    });
    let summary = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join("tune.json"), &(summary + "\n"))?;
    Ok(coefficients_of(seed, &trial))
}

fn engine_windows(engine: &ResidualEngine) -> Vec<usize> {
    match (&engine.tuning().window, &engine.config().window) {
        (Some(w), _) => vec![*w],
        (None, policy) => policy.candidates(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Table {
        text.parse().unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), config);
    }

    #[test]
    fn manifest_is_accepted_as_config() {
        let mut config = RunConfig::default();
        config.seeds = vec![3, 4];
        config.window = WindowPolicy::Adaptive {
            candidates: vec![5, 10],
            p_threshold: 0.05,
            pvalue: Default::default(),
        };
        let m = Manifest::new("bench", &config, vec![SeedCoefficients { seed: 3, beta: vec![0.1, -0.25] }]);
        let text = m.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), config);
        let back: Manifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let mut t = table("alpha = 0.2\n[window]\nmode = \"fixed\"\nw = 4\n");
        apply_set(&mut t, "window.w=12").unwrap();
        apply_set(&mut t, "kernel.family=gaussian").unwrap();
        apply_set(&mut t, "seeds=[1, 2]").unwrap();
        let c = RunConfig::from_table(t).unwrap();
        assert_eq!(c.alpha, 0.2);
        assert_eq!(c.window, WindowPolicy::Fixed { w: 12 });
        assert_eq!(c.kernel.family, KernelFamily::Gaussian);
        assert_eq!(c.seeds, vec![1, 2]);
        assert!(apply_set(&mut table("alpha = 1.0"), "alpha.x=1").is_err());
        assert!(apply_set(&mut table(""), "novalue").is_err());
    }

    #[test]
    fn flags_take_precedence_over_sets() {
        let args = CommonArgs {
            config: None,
            set: vec!["alpha=0.2".into(), "window.mode=\"fixed\"".into(), "window.w=3".into()],
            input: None,
            generator: None,
            length: None,
            alpha: Some(0.05),
            window: Some(7),
            seeds: Some(vec![9]),
            output_dir: None,
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.window, WindowPolicy::Fixed { w: 7 });
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.predictor_lags(), 7);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::from_toml("alpha = \"high\"").unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "alpha"), "{err}");
        let err = RunConfig::from_toml("[kernel]\nfamily = \"triangle\"").unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "kernel.family"), "{err}");
        let err = RunConfig::from_toml("bogus = 1").unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        let mut c = RunConfig::default();
        c.beta_step = 0.03;
        assert!(matches!(c.validate().unwrap_err(), CliError::Config { key, .. } if key == "beta_step"));
        c = RunConfig::default();
        c.window = WindowPolicy::Cv { candidates: vec![5, 5] };
        assert!(matches!(c.validate().unwrap_err(), CliError::Config { key, .. } if key == "window.candidates"));
        c = RunConfig::default();
        c.predictor.kind = PredictorName::External;
        assert!(matches!(c.validate().unwrap_err(), CliError::Config { key, .. } if key == "predictor.path"));
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "t,y\n1,0.5\n2,-1.5\n").unwrap();
        assert_eq!(ingest_csv(&p).unwrap(), vec![0.5, -1.5]);

        fs::write(&p, "y\n1\nNaN\n3\n").unwrap();
        let err = ingest_csv(&p).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_DATA);
        assert!(err.to_string().contains("row 3"), "{err}");

        fs::write(&p, "t,y\n2,1\n1,2\n3,3\n").unwrap();
        assert!(ingest_csv(&p).unwrap_err().to_string().contains("strictly increasing"));

        fs::write(&p, "t,value\n1,2\n").unwrap();
        assert!(ingest_csv(&p).unwrap_err().to_string().contains("missing column `y`"));

        fs::write(&p, "y\n1\nabc\n").unwrap();
        assert!(ingest_csv(&p).unwrap_err().to_string().contains("row 3"));
    }

    #[test]
    fn key_lookup_in_serialized_text() {
        let text = "alpha = 1\n\n[window]\nmode = \"x\"\n";
        assert_eq!(key_at(text, 2), "alpha");
        assert_eq!(key_at(text, text.len() - 3), "window.mode");
    }
}
