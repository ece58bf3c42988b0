//! Coverage metrics, baselines and the multi-seed benchmark runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorSpec;
use crate::error::{invalid, Error, Result};
use crate::pipeline::{IntervalResult, Pipeline, PipelineConfig, ResidualEngine, TuningReport};
use crate::predictor::{fit as fit_predictor, PredictorSpec};
use crate::rnw::Reweighting;

pub const DEFAULT_ROLLING_WINDOW: usize = 100;
pub const DEFAULT_ACI_GAMMA: f64 = 0.01;
pub const ACI_ALPHA_BOUNDS: (f64, f64) = (0.001, 0.999);

/// Rolling coverage `RC_t = (1/m) sum_{i<m} covered_{t-i}` for `t >= m`.
pub fn rolling_coverage(covered: &[bool], m: usize) -> Vec<f64> {
    if m == 0 || m > covered.len() {
        return Vec::new();
    }
    let mut hits = covered[..m].iter().filter(|&&c| c).count();
    let mut out = Vec::with_capacity(covered.len() - m + 1);
    out.push(hits as f64 / m as f64);
    for t in m..covered.len() {
        hits += usize::from(covered[t]);
        hits -= usize::from(covered[t - m]);
        out.push(hits as f64 / m as f64);
    }
    out
}

/// Per-method outcome on one test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub per_step: Vec<IntervalResult>,
    pub marginal_coverage: f64,
    pub mean_width: f64,
    pub rolling_window: usize,
    pub rolling: Vec<f64>,
}

impl EvaluationReport {
    pub fn from_steps(method: Method, per_step: Vec<IntervalResult>, rolling_window: usize) -> Result<Self> {
        if rolling_window == 0 {
            return Err(invalid("rolling_window", "must be at least 1"));
        }
        if per_step.is_empty() {
            return Err(Error::EmptySample);
        }
        let covered: Vec<bool> = per_step.iter().map(|r| r.covered.unwrap_or(false)).collect();
        let m = per_step.len() as f64;
        let marginal_coverage = covered.iter().filter(|&&c| c).count() as f64 / m;
        let mean_width = per_step.iter().map(IntervalResult::width).sum::<f64>() / m;
        Ok(Self {
            method,
            rolling: rolling_coverage(&covered, rolling_window),
            per_step,
            marginal_coverage,
            mean_width,
            rolling_window,
        })
    }

    pub fn covered(&self) -> Vec<bool> {
        self.per_step.iter().map(|r| r.covered.unwrap_or(false)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.per_step.iter().map(IntervalResult::width).collect()
    }

    pub fn degenerate_steps(&self) -> usize {
        self.per_step.iter().filter(|r| r.degenerate).count()
    }
}

/// A test-phase observation with its point prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPoint {
    pub t: usize,
    pub prediction: f64,
    pub observed: f64,
}

/// `ceil((1 - alpha)(n + 1))`-th smallest absolute residual, clamped to the
/// available ranks.
pub fn scp_quantile(residuals: &[f64], alpha: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut scores: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let rank = ((1.0 - alpha) * (n + 1) as f64 - 1e-9).ceil() as usize;
    Ok(scores[rank.clamp(1, n) - 1])
}

fn symmetric_step(point: &StreamPoint, q: f64) -> IntervalResult {
    let lower = point.prediction - q;
    let upper = point.prediction + q;
    IntervalResult {
        t: point.t,
        lower,
        upper,
        beta_star: 0.0,
        gap: 0.0,
        degenerate: false,
        window: 0,
        prediction: point.prediction,
        covered: Some(lower <= point.observed && point.observed <= upper),
    }
}

/// Split conformal: one symmetric half-width from the calibration residuals
/// for the whole stream.
pub fn scp_baseline(
    calibration: &[f64],
    alpha: f64,
    stream: &[StreamPoint],
    rolling_window: usize,
) -> Result<EvaluationReport> {
    let q = scp_quantile(calibration, alpha)?;
    let steps = stream.iter().map(|p| symmetric_step(p, q)).collect();
    EvaluationReport::from_steps(Method::Scp, steps, rolling_window)
}

/// `alpha_{t+1} = alpha_t + gamma (alpha - err_t)`, clamped.
pub fn aci_update(alpha_t: f64, alpha: f64, gamma: f64, covered: bool) -> f64 {
    let err = if covered { 0.0 } else { 1.0 };
    (alpha_t + gamma * (alpha - err)).clamp(ACI_ALPHA_BOUNDS.0, ACI_ALPHA_BOUNDS.1)
}

/// Adaptive conformal inference on top of split conformal. The score set
/// is a sliding window of the most recent absolute residuals, seeded with the
/// calibration residuals.
pub fn aci_baseline(
    calibration: &[f64],
    alpha: f64,
    gamma: f64,
    stream: &[StreamPoint],
    rolling_window: usize,
) -> Result<EvaluationReport> {
    aci_trace(calibration, alpha, gamma, stream, rolling_window).map(|(r, _)| r)
}

/// [`aci_baseline`] plus the working level `alpha_t` used at each step.
pub fn aci_trace(
    calibration: &[f64],
    alpha: f64,
    gamma: f64,
    stream: &[StreamPoint],
    rolling_window: usize,
) -> Result<(EvaluationReport, Vec<f64>)> {
    if !(gamma >= 0.0) {
        return Err(invalid("gamma", "must be nonnegative"));
    }
    let mut scores = crate::embedding::ResidualHistory::from_values(calibration.len().max(1), calibration)?;
    if scores.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut alpha_t = alpha;
    let mut levels = Vec::with_capacity(stream.len());
    let mut steps = Vec::with_capacity(stream.len());
    for p in stream {
        levels.push(alpha_t);
        let q = scp_quantile(&scores.values(), alpha_t)?;
        let step = symmetric_step(p, q);
        alpha_t = aci_update(alpha_t, alpha, gamma, step.covered == Some(true));
        scores.push(p.observed - p.prediction);
        steps.push(step);
    }
    Ok((EvaluationReport::from_steps(Method::Aci, steps, rolling_window)?, levels))
}

/// Streams the test points through a pipeline seeded with `calibration`.
pub fn run_pipeline(
    config: &PipelineConfig,
    calibration: &[f64],
    stream: &[StreamPoint],
    method: Method,
    rolling_window: usize,
) -> Result<(EvaluationReport, TuningReport)> {
    let engine = ResidualEngine::new(config.clone(), calibration)?;
    let tuning = engine.tuning().clone();
    let mut pipeline = PipelineDriver::new(engine);
    for p in stream {
        pipeline.step(p)?;
    }
    Ok((
        EvaluationReport::from_steps(method, pipeline.results, rolling_window)?,
        tuning,
    ))
}

/// Step/observe driver for precomputed predictions.
struct PipelineDriver {
    engine: ResidualEngine,
    results: Vec<IntervalResult>,
}

impl PipelineDriver {
    fn new(engine: ResidualEngine) -> Self {
        Self {
            engine,
            results: Vec::new(),
        }
    }

    fn step(&mut self, p: &StreamPoint) -> Result<()> {
        let iv = self.engine.interval()?;
        let lower = p.prediction + iv.lower;
        let upper = p.prediction + iv.upper;
        self.results.push(IntervalResult {
            t: p.t,
            lower,
            upper,
            beta_star: iv.beta_star,
            gap: iv.gap,
            degenerate: iv.degenerate,
            window: iv.window,
            prediction: p.prediction,
            covered: Some(lower <= p.observed && p.observed <= upper),
        });
        self.engine.push(p.observed - p.prediction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Kowcpi,
    PlainNw,
    Scp,
    Aci,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kowcpi => "kowcpi",
            Method::PlainNw => "plain-nw",
            Method::Scp => "scp",
            Method::Aci => "aci",
        }
    }

    pub const ALL: [Method; 4] = [Method::Kowcpi, Method::PlainNw, Method::Scp, Method::Aci];
}

/// Where each trial's series comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// One fresh path per seed.
    Generator(GeneratorSpec),
    /// A fixed series; seeds only drive the predictor.
    Series(Vec<f64>),
}

/// Train / tune / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub tune: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 0.7, tune: 0.1 }
    }
}

impl SplitRatio {
    /// `(train_end, tune_end)` indices for a series of length `len`.
    pub fn boundaries(&self, len: usize) -> (usize, usize) {
        let train_end = (self.train * len as f64).round() as usize;
        let tune_end = ((self.train + self.tune) * len as f64).round() as usize;
        (train_end.min(len), tune_end.min(len))
    }
}

/// Which residuals seed the KOWCPI history at the start of the test split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistorySource {
    /// Training residuals followed by tuning residuals. In cv mode the tuning
    /// residuals are the validation block.
    #[default]
    TrainAndTune,
    /// Tuning residuals only.
    Tune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub source: DataSource,
    pub predictor: PredictorSpec,
    pub pipeline: PipelineConfig,
    pub methods: Vec<Method>,
    pub aci_gamma: f64,
    pub rolling_window: usize,
    pub split: SplitRatio,
    pub history: HistorySource,
}

/// All data needed to evaluate methods on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrial {
    pub series: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Training-split residuals (out-of-bag for a forest), oldest first.
    pub train_residuals: Vec<f64>,
    /// Residuals of the tuning split, oldest first.
    pub calibration: Vec<f64>,
    pub stream: Vec<StreamPoint>,
}

/// Generates (or takes) the series, fits the predictor on the training
/// split and computes tuning residuals and test predictions.
pub fn prepare_trial(config: &BenchConfig, seed: u64) -> Result<PreparedTrial> {
    let (series, coefficients) = match &config.source {
        DataSource::Generator(spec) => {
            let g = spec.generate(seed)?;
            (g.values, g.coefficients)
        }
        DataSource::Series(s) => (s.clone(), Vec::new()),
    };
    let (train_end, tune_end) = config.split.boundaries(series.len());
    if tune_end <= train_end || tune_end >= series.len() {
        return Err(Error::InsufficientData(format!(
            "series of length {} leaves an empty tuning or test split",
            series.len()
        )));
    }
    let predictor = fit_predictor(&config.predictor, &series[..train_end], seed)?;
    let train_residuals = predictor.training_residuals(&series[..train_end])?;
    let predictions = predictor.predict_range(&series, train_end..series.len())?;
    let calibration: Vec<f64> = (train_end..tune_end)
        .map(|t| series[t] - predictions[t - train_end])
        .collect();
    let stream = (tune_end..series.len())
        .map(|t| StreamPoint {
            t,
            prediction: predictions[t - train_end],
            observed: series[t],
        })
        .collect();
    Ok(PreparedTrial {
        series,
        coefficients,
        train_residuals,
        calibration,
        stream,
    })
}

impl PreparedTrial {
    /// Initial KOWCPI residual history under `source`, oldest first.
    pub fn history(&self, source: HistorySource) -> Vec<f64> {
        match source {
            HistorySource::Tune => self.calibration.clone(),
            HistorySource::TrainAndTune => {
                let mut all = self.train_residuals.clone();
                all.extend_from_slice(&self.calibration);
                all
            }
        }
    }
}

/// Runs one method on a prepared trial.
pub fn evaluate_method(config: &BenchConfig, trial: &PreparedTrial, method: Method) -> Result<EvaluationReport> {
    let alpha = config.pipeline.alpha;
    let m = config.rolling_window;
    match method {
        Method::Kowcpi | Method::PlainNw => {
            let mut pipeline = PipelineConfig {
                reweighting: if method == Method::Kowcpi {
                    Reweighting::EmpiricalLikelihood
                } else {
                    Reweighting::PlainNw
                },
                ..config.pipeline.clone()
            };
            if config.history == HistorySource::TrainAndTune && pipeline.cv_validation.is_none() {
                pipeline.cv_validation = Some(trial.calibration.len());
            }
            run_pipeline(&pipeline, &trial.history(config.history), &trial.stream, method, m).map(|r| r.0)
        }
        Method::Scp => scp_baseline(&trial.calibration, alpha, &trial.stream, m),
        Method::Aci => aci_baseline(&trial.calibration, alpha, config.aci_gamma, &trial.stream, m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub method: Method,
    pub coverage: f64,
    pub mean_width: f64,
    pub degenerate_steps: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub width_mean: f64,
    pub width_std: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<SummaryRow>,
    pub trials: Vec<TrialResult>,
    /// Seasonal-model coefficients drawn per seed (empty for other sources).
    pub coefficients: Vec<(u64, Vec<f64>)>,
    #[serde(skip)]
    pub reports: Vec<(u64, EvaluationReport)>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every method on every seed and aggregates coverage and width.
pub fn run_benchmark(config: &BenchConfig, seeds: &[u64]) -> Result<BenchTable> {
    if seeds.is_empty() {
        return Err(invalid("seeds", "must be nonempty"));
    }
    if config.methods.is_empty() {
        return Err(invalid("methods", "must be nonempty"));
    }
    let per_seed: Vec<(u64, Vec<f64>, Vec<EvaluationReport>)> = seeds
        .par_iter()
        .map(|&seed| {
            let trial = prepare_trial(config, seed)?;
            let reports = config
                .methods
                .par_iter()
                .map(|&m| evaluate_method(config, &trial, m))
                .collect::<Result<Vec<_>>>()?;
            Ok((seed, trial.coefficients, reports))
        })
        .collect::<Result<_>>()?;

    let mut trials = Vec::new();
    let mut reports = Vec::new();
    let mut coefficients = Vec::new();
    for (seed, coef, reps) in per_seed {
        if !coef.is_empty() {
            coefficients.push((seed, coef));
        }
        for r in reps {
            trials.push(TrialResult {
                seed,
                method: r.method,
                coverage: r.marginal_coverage,
                mean_width: r.mean_width,
                degenerate_steps: r.degenerate_steps(),
                steps: r.per_step.len(),
            });
            reports.push((seed, r));
        }
    }
    let rows = config
        .methods
        .iter()
        .map(|&method| {
            let cov: Vec<f64> = trials.iter().filter(|t| t.method == method).map(|t| t.coverage).collect();
            let wid: Vec<f64> = trials.iter().filter(|t| t.method == method).map(|t| t.mean_width).collect();
            let (coverage_mean, coverage_std) = mean_std(&cov);
            let (width_mean, width_std) = mean_std(&wid);
            SummaryRow {
                method,
                coverage_mean,
                coverage_std,
                width_mean,
                width_std,
                trials: cov.len(),
            }
        })
        .collect();
    Ok(BenchTable {
        rows,
        trials,
        coefficients,
        reports,
    })
}

impl BenchTable {
    pub fn row(&self, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,coverage_mean,coverage_std,width_mean,width_std,trials`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,coverage_mean,coverage_std,width_mean,width_std,trials\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method.name(),
                r.coverage_mean,
                r.coverage_std,
                r.width_mean,
                r.width_std,
                r.trials
            ));
        }
        out
    }

    /// `seed,method,coverage,mean_width,degenerate_steps,steps`.
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("seed,method,coverage,mean_width,degenerate_steps,steps\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.seed,
                t.method.name(),
                t.coverage,
                t.mean_width,
                t.degenerate_steps,
                t.steps
            ));
        }
        out
    }
}

/// `t,lower,upper,beta_star,gap,covered` with `covered` as 0/1.
pub fn intervals_csv(steps: &[IntervalResult]) -> String {
    let mut out = String::from("t,lower,upper,beta_star,gap,covered\n");
    for r in steps {
        let covered = match r.covered {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t, r.lower, r.upper, r.beta_star, r.gap, covered
        ));
    }
    out
}

/// Interval trace of a full [`Pipeline`], for callers driving one directly.
pub fn report_from_pipeline(pipeline: Pipeline, rolling_window: usize) -> Result<EvaluationReport> {
    EvaluationReport::from_steps(Method::Kowcpi, pipeline.into_results(), rolling_window)
}
