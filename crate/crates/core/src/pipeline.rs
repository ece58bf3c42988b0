//! Sequential interval construction.
//!
//! At every step the residual history is segmented, the reweighted
//! estimator is fitted at the query segment, and the miscoverage budget
//! `alpha` is split between the two tails by scanning
//! `beta in {0, step, ..., alpha}` for the narrowest
//! `[Q(beta), Q(1 - alpha + beta)]`. The interval for `Y_t` is that residual
//! interval shifted by the point prediction. Once `Y_t` is observed its
//! residual enters the history and the oldest one leaves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidth_with, BandwidthSelection, GridSpec};
use crate::embedding::ResidualHistory;
use crate::error::{invalid, Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::predictor::FittedPredictor;
use crate::rnw::{fit_rnw_with, Reweighting, RnwFit};
use crate::window::{adaptive_window_on, cv_window, CvSelection, PValueMethod, WindowPolicy};

pub const DEFAULT_BETA_STEP: f64 = 0.005;

/// One emitted prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub t: usize,
    pub lower: f64,
    pub upper: f64,
    pub beta_star: f64,
    pub gap: f64,
    pub degenerate: bool,
    /// Window length used for this step.
    pub window: usize,
    pub prediction: f64,
    pub covered: Option<bool>,
}

impl IntervalResult {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Outcome of the tail-split search on one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSearch {
    pub beta_star: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BetaSearch {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `{0, step, 2 step, ..., alpha}`; `step` must divide `alpha`.
pub fn beta_grid(alpha: f64, step: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if !(step > 0.0 && step <= alpha) {
        return Err(invalid("beta_step", format!("must lie in (0, alpha], got {step}")));
    }
    let k = (alpha / step).round();
    if (k * step - alpha).abs() > 1e-12 {
        return Err(invalid("beta_step", format!("{step} does not divide alpha = {alpha}")));
    }
    Ok((0..=k as usize).map(|i| i as f64 * step).collect())
}

/// Narrowest `[Q(beta), Q(1 - alpha + beta)]` over the beta grid, ties
/// toward the smallest beta.
pub fn beta_star_search(fit: &RnwFit, alpha: f64, step: f64) -> Result<BetaSearch> {
    let grid = beta_grid(alpha, step)?;
    let mut best: Option<BetaSearch> = None;
    for beta in grid {
        let lower = fit.quantile_unchecked(beta);
        let upper = fit.quantile_unchecked((1.0 - alpha + beta).min(1.0));
        let candidate = BetaSearch {
            beta_star: beta,
            lower,
            upper,
        };
        if best.is_none_or(|b| candidate.width() < b.width()) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// How the kernel bandwidth is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthPolicy {
    Fixed(f64),
    Aic {
        grid: GridSpec,
        /// Re-run the selection after this many new residuals.
        reselect_every: Option<usize>,
    },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::Aic {
            grid: GridSpec::default(),
            reselect_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    /// Residual-history length; `None` uses every residual supplied at start.
    pub history: Option<usize>,
    pub window: WindowPolicy,
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthPolicy,
    pub beta_step: f64,
    /// In cv mode, how many trailing residuals score the candidates while the
    /// rest warm them up; `None` splits the history in half.
    #[serde(default)]
    pub cv_validation: Option<usize>,
    #[serde(skip)]
    pub reweighting: Reweighting,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            history: None,
            window: WindowPolicy::Fixed { w: 10 },
            kernel: KernelFamily::Epanechnikov,
            bandwidth: BandwidthPolicy::default(),
            beta_step: DEFAULT_BETA_STEP,
            cv_validation: None,
            reweighting: Reweighting::EmpiricalLikelihood,
        }
    }
}

impl PipelineConfig {
    /// `(warm, validation)` sizes of the cv split of `history` residuals.
    pub fn cv_split(&self, history: usize) -> Result<(usize, usize)> {
        let validation = self.cv_validation.unwrap_or(history - history / 2);
        if validation == 0 || validation >= history {
            return Err(invalid(
                "cv_validation",
                format!("must be in [1, {}) for a history of {history}", history.max(1)),
            ));
        }
        Ok((history - validation, validation))
    }

    /// Checks every parameter against a history of `history` residuals.
    pub fn validate(&self, history: usize) -> Result<()> {
        beta_grid(self.alpha, self.beta_step)?;
        match &self.window {
            WindowPolicy::Cv { .. } => self.window.validate(history - self.cv_split(history)?.1)?,
            other => other.validate(history)?,
        }
        match self.bandwidth {
            BandwidthPolicy::Fixed(h) => {
                KernelSpec::new(self.kernel, h)?;
            }
            BandwidthPolicy::Aic { grid, reselect_every } => {
                if grid.count == 0 || !(grid.factor >= 1.0) {
                    return Err(invalid("grid", "count must be positive and factor >= 1"));
                }
                if reselect_every == Some(0) {
                    return Err(invalid("reselect_every", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum WindowChoice {
    Fixed(usize),
    Adaptive {
        candidates: Vec<usize>,
        p_threshold: f64,
        method: PValueMethod,
    },
}

/// How the window and bandwidths were resolved from the initial residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub cv: Option<CvSelection>,
    /// Window in force after tuning; `None` in adaptive mode.
    pub window: Option<usize>,
    pub bandwidths: BTreeMap<usize, BandwidthSelection>,
}

/// Residual-level interval engine: everything except the point predictor.
#[derive(Debug, Clone)]
pub struct ResidualEngine {
    config: PipelineConfig,
    history: ResidualHistory,
    window: WindowChoice,
    kernels: BTreeMap<usize, KernelSpec>,
    tuning: TuningReport,
    pushes_since_selection: usize,
}

/// Residual-scale interval `[lower, upper]` plus its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualInterval {
    pub lower: f64,
    pub upper: f64,
    pub beta_star: f64,
    pub gap: f64,
    pub degenerate: bool,
    pub window: usize,
}

impl ResidualEngine {
    /// Resolves window length and bandwidths from `residuals` (oldest first)
    /// and keeps the last `history` of them as the working buffer.
    pub fn new(config: PipelineConfig, residuals: &[f64]) -> Result<Self> {
        let capacity = config.history.unwrap_or(residuals.len());
        if capacity > residuals.len() {
            return Err(Error::InsufficientData(format!(
                "history of {capacity} residuals requested, {} available",
                residuals.len()
            )));
        }
        config.validate(capacity)?;
        if let Some(index) = residuals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let history = ResidualHistory::from_values(capacity, residuals)?;
        let mut cv = None;
        let window = match &config.window {
            WindowPolicy::Fixed { w } => WindowChoice::Fixed(*w),
            WindowPolicy::Adaptive {
                candidates,
                p_threshold,
                pvalue,
            } => WindowChoice::Adaptive {
                candidates: candidates.clone(),
                p_threshold: *p_threshold,
                method: *pvalue,
            },
            WindowPolicy::Cv { candidates } => {
                let selection = cross_validate(&config, &history.values(), candidates)?;
                let w = selection.w;
                cv = Some(selection);
                WindowChoice::Fixed(w)
            }
        };
        let mut engine = Self {
            tuning: TuningReport {
                cv,
                window: match &window {
                    WindowChoice::Fixed(w) => Some(*w),
                    WindowChoice::Adaptive { .. } => None,
                },
                bandwidths: BTreeMap::new(),
            },
            config,
            history,
            window,
            kernels: BTreeMap::new(),
            pushes_since_selection: 0,
        };
        engine.select_bandwidths()?;
        Ok(engine)
    }

    fn windows(&self) -> Vec<usize> {
        match &self.window {
            WindowChoice::Fixed(w) => vec![*w],
            WindowChoice::Adaptive { candidates, .. } => candidates.clone(),
        }
    }

    fn select_bandwidths(&mut self) -> Result<()> {
        let values = self.history.values();
        for w in self.windows() {
            let kernel = match self.config.bandwidth {
                BandwidthPolicy::Fixed(h) => KernelSpec::new(self.config.kernel, h)?,
                BandwidthPolicy::Aic { grid, .. } => {
                    let segments = crate::embedding::SegmentSet::from_residuals(&values, w)?;
                    let sel = select_bandwidth_with(
                        &segments,
                        self.config.kernel,
                        &grid.grid_for(&segments),
                        self.config.reweighting,
                    )?;
                    let kernel = sel.kernel;
                    self.tuning.bandwidths.insert(w, sel);
                    kernel
                }
            };
            self.kernels.insert(w, kernel);
        }
        self.pushes_since_selection = 0;
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn history(&self) -> &ResidualHistory {
        &self.history
    }

    pub fn tuning(&self) -> &TuningReport {
        &self.tuning
    }

    pub fn kernel_for(&self, w: usize) -> Option<KernelSpec> {
        self.kernels.get(&w).copied()
    }

    /// Window the next interval will use.
    pub fn current_window(&self) -> Result<usize> {
        match &self.window {
            WindowChoice::Fixed(w) => Ok(*w),
            WindowChoice::Adaptive {
                candidates,
                p_threshold,
                method,
            } => adaptive_window_on(&self.history.values(), candidates, *p_threshold, *method),
        }
    }

    /// Fits the estimator at the current query segment.
    pub fn fit(&self) -> Result<(usize, RnwFit)> {
        let w = self.current_window()?;
        let kernel = self.kernels[&w];
        let segments = self.history.segments(w)?;
        Ok((w, fit_rnw_with(&segments, &kernel, self.config.reweighting)?))
    }

    pub fn interval(&self) -> Result<ResidualInterval> {
        let (window, fit) = self.fit()?;
        let search = beta_star_search(&fit, self.config.alpha, self.config.beta_step)?;
        Ok(ResidualInterval {
            lower: search.lower,
            upper: search.upper,
            beta_star: search.beta_star,
            gap: fit.discrete_gap(),
            degenerate: fit.is_degenerate(),
            window,
        })
    }

    pub fn push(&mut self, residual: f64) -> Result<()> {
        if !residual.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        self.history.push(residual);
        self.pushes_since_selection += 1;
        if let BandwidthPolicy::Aic {
            reselect_every: Some(k),
            ..
        } = self.config.bandwidth
        {
            if self.pushes_since_selection >= k {
                self.select_bandwidths()?;
            }
        }
        Ok(())
    }

    /// Streams `residuals` through the engine; returns (coverage, mean width).
    pub fn replay(&mut self, residuals: &[f64]) -> Result<(f64, f64)> {
        if residuals.is_empty() {
            return Err(Error::EmptySample);
        }
        let mut hits = 0usize;
        let mut width = 0.0;
        for &e in residuals {
            let iv = self.interval()?;
            if iv.lower <= e && e <= iv.upper {
                hits += 1;
            }
            width += iv.upper - iv.lower;
            self.push(e)?;
        }
        let m = residuals.len() as f64;
        Ok((hits as f64 / m, width / m))
    }
}

/// Splits the residuals per [`PipelineConfig::cv_split`]: the head warms a
/// fixed-window engine per candidate and the tail scores it.
fn cross_validate(config: &PipelineConfig, residuals: &[f64], candidates: &[usize]) -> Result<CvSelection> {
    let (warm, _) = config.cv_split(residuals.len())?;
    let (head, tail) = residuals.split_at(warm);
    cv_window(candidates, config.alpha, |w| {
        let cfg = PipelineConfig {
            history: None,
            window: WindowPolicy::Fixed { w },
            bandwidth: match config.bandwidth {
                BandwidthPolicy::Aic { grid, .. } => BandwidthPolicy::Aic {
                    grid,
                    reselect_every: None,
                },
                fixed => fixed,
            },
            ..config.clone()
        };
        ResidualEngine::new(cfg, head)?.replay(tail)
    })
}

/// Full sequential predictor: residual engine plus point predictor.
///
/// `step` and `observe` must alternate.
#[derive(Debug, Clone)]
pub struct Pipeline {
    engine: ResidualEngine,
    predictor: FittedPredictor,
    pending: Option<IntervalResult>,
    results: Vec<IntervalResult>,
}

impl Pipeline {
    pub fn new(engine: ResidualEngine, predictor: FittedPredictor) -> Self {
        Self {
            engine,
            predictor,
            pending: None,
            results: Vec::new(),
        }
    }

    pub fn engine(&self) -> &ResidualEngine {
        &self.engine
    }

    pub fn predictor(&self) -> &FittedPredictor {
        &self.predictor
    }

    /// Interval for time `t` from its feature vector.
    pub fn step(&mut self, t: usize, features: &[f64]) -> Result<IntervalResult> {
        let prediction = self.predictor.predict(features)?;
        self.step_with_prediction(t, prediction)
    }

    /// Interval for time `t` given an already computed point prediction.
    pub fn step_with_prediction(&mut self, t: usize, prediction: f64) -> Result<IntervalResult> {
        if self.pending.is_some() {
            return Err(Error::State("step called twice without observe".into()));
        }
        if !prediction.is_finite() {
            return Err(Error::NonFinite { index: t });
        }
        let iv = self.engine.interval()?;
        let result = IntervalResult {
            t,
            lower: prediction + iv.lower,
            upper: prediction + iv.upper,
            beta_star: iv.beta_star,
            gap: iv.gap,
            degenerate: iv.degenerate,
            window: iv.window,
            prediction,
            covered: None,
        };
        self.pending = Some(result);
        Ok(result)
    }

    /// Records `Y_t`, marks coverage and pushes the new residual.
    pub fn observe(&mut self, y: f64) -> Result<IntervalResult> {
        let mut result = self
            .pending
            .take()
            .ok_or_else(|| Error::State("observe called without a pending step".into()))?;
        self.engine.push(y - result.prediction)?;
        result.covered = Some(result.contains(y));
        self.results.push(result);
        Ok(result)
    }

    pub fn results(&self) -> &[IntervalResult] {
        &self.results
    }

    pub fn into_results(self) -> Vec<IntervalResult> {
        self.results
    }
}
