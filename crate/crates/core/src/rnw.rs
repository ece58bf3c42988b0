//! Reweighted Nadaraya-Watson estimation of the conditional residual CDF.
//!
//! For a query segment `x`, every stored segment `X_i` receives a balance
//! term `S_i = ([X_i]_0 - [x]_0) K_h(X_i - x)`. The empirical-likelihood
//! adjustment weights are
//!
//! ```text
//! p_i = 1 / (n (1 + lambda S_i))
//! ```
//!
//! where `lambda` solves `sum_i S_i / (1 + lambda S_i) = 0` on the open
//! interval keeping every `1 + lambda S_i` positive, i.e. the stationary
//! point of the convex dual `L(lambda) = -sum_i log(1 + lambda S_i)`. The
//! final weights are `W_i = p_i K_i / sum_j p_j K_j`, and the conditional CDF
//! is the weighted empirical CDF of the responses under `W`.

use std::cmp::Ordering;

use crate::embedding::SegmentSet;
use crate::error::{invalid, Error, Result};
use crate::kernels::KernelSpec;

/// Default tolerance on `|sum_i S_i / (1 + lambda S_i)|`.
pub const LAMBDA_TOLERANCE: f64 = 1e-12;

/// Slack used when comparing cumulative weights with a quantile level, so
/// that accumulated rounding (e.g. ten weights of 0.1) does not skip an atom.
pub const QUANTILE_TOLERANCE: f64 = 1e-12;

const MAX_SOLVER_ITERATIONS: usize = 400;

/// Result of the one-dimensional dual problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    /// Set when no interior stationary point exists (all `S_i` zero or of a
    /// single sign) and `lambda` fell back to zero.
    pub degenerate: bool,
}

/// `sum_i S_i / (1 + lambda S_i)`, the negated derivative of the dual.
pub fn stationarity(balance: &[f64], lambda: f64) -> f64 {
    balance.iter().map(|s| s / (1.0 + lambda * s)).sum()
}

/// Dual objective `-sum_i log(1 + lambda S_i)`; `+inf` outside the domain.
pub fn dual_objective(balance: &[f64], lambda: f64) -> f64 {
    let mut acc = 0.0;
    for s in balance {
        let arg = 1.0 + lambda * s;
        if arg <= 0.0 {
            return f64::INFINITY;
        }
        acc -= arg.ln();
    }
    acc
}

/// Open interval of `lambda` values with every `1 + lambda S_i > 0`, when it
/// is bounded on both sides.
pub fn feasible_interval(balance: &[f64]) -> Option<(f64, f64)> {
    let max = balance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = balance.iter().copied().fold(f64::INFINITY, f64::min);
    (max > 0.0 && min < 0.0).then(|| (-1.0 / max, -1.0 / min))
}

/// Solves for the dual variable by Newton iterations safeguarded with a
/// shrinking bracket.
///
/// The stationarity function is strictly decreasing on the feasible interval
/// and diverges to `+inf`/`-inf` at its two ends, so the bracket always holds
/// the root and only interior points are ever evaluated.
pub fn solve_lambda(balance: &[f64], tolerance: f64) -> Result<LambdaSolution> {
    if let Some(index) = balance.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(invalid("tolerance", "must be positive"));
    }
    let Some((mut lo, mut hi)) = feasible_interval(balance) else {
        return Ok(LambdaSolution {
            lambda: 0.0,
            degenerate: true,
        });
    };

    let eval = |lambda: f64| {
        let mut g = 0.0;
        let mut dg = 0.0;
        for s in balance {
            let r = s / (1.0 + lambda * s);
            g += r;
            dg -= r * r;
        }
        (g, dg)
    };

    let mut x = 0.0;
    let mut best = (f64::INFINITY, x);
    let mut prev_abs = f64::INFINITY;
    for _ in 0..MAX_SOLVER_ITERATIONS {
        let (g, dg) = eval(x);
        if g.abs() < best.0 {
            best = (g.abs(), x);
        }
        // |g| alone depends on the scale of S, so also require a negligible
        // Newton step before stopping.
        if g.abs() < tolerance && (g / dg).abs() <= 1e-13 * x.abs().max(1.0) {
            break;
        }
        if g == 0.0 {
            break;
        }
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mid = 0.5 * (lo + hi);
        let newton = x - g / dg;
        // Newton only while the last step at least halved |g|.
        let productive = prev_abs.is_infinite() || g.abs() < 0.5 * prev_abs;
        let next = if productive && newton > lo && newton < hi {
            newton
        } else {
            mid
        };
        prev_abs = g.abs();
        if next == x || next <= lo || next >= hi || hi - lo <= 1e-14 * x.abs().max(1.0) {
            break;
        }
        x = next;
    }
    Ok(LambdaSolution {
        lambda: best.1,
        degenerate: false,
    })
}

/// How the adjustment weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reweighting {
    /// Empirical-likelihood adjustment (the reweighted estimator).
    #[default]
    EmpiricalLikelihood,
    /// `lambda` forced to zero: classical Nadaraya-Watson weights.
    PlainNw,
}

/// Weights and weighted ECDF of one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct RnwFit {
    lambda: f64,
    adjustment: Vec<f64>,
    weights: Vec<f64>,
    responses: Vec<f64>,
    kernel_values: Vec<f64>,
    balance: Vec<f64>,
    degenerate: bool,
    /// Distinct positive-weight atom values, ascending, with cumulative mass.
    support: Vec<(f64, f64)>,
}

impl RnwFit {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn adjustment(&self) -> &[f64] {
        &self.adjustment
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Kernel profile values `k(|X_i - x| / h)`; the common `h^{-w}` factor
    /// is omitted since no weight depends on it.
    pub fn kernel_values(&self) -> &[f64] {
        &self.kernel_values
    }

    /// Balance terms `S_i`.
    pub fn balance(&self) -> &[f64] {
        &self.balance
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Atoms `(Y_i, W_i)`.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.responses.iter().copied().zip(self.weights.iter().copied())
    }

    /// Weighted CDF `sum_i W_i 1(Y_i <= b)`.
    pub fn cdf(&self, b: f64) -> f64 {
        let k = self.support.partition_point(|&(v, _)| v <= b);
        if k == 0 {
            0.0
        } else {
            self.support[k - 1].1.clamp(0.0, 1.0)
        }
    }

    /// Generalized inverse `inf { y : F(y) >= beta }`.
    ///
    /// `beta = 0` yields the smallest atom carrying positive weight.
    pub fn quantile(&self, beta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid("beta", format!("must lie in [0, 1], got {beta}")));
        }
        Ok(self.quantile_unchecked(beta))
    }

    pub(crate) fn quantile_unchecked(&self, beta: f64) -> f64 {
        let k = self
            .support
            .partition_point(|&(_, c)| c + QUANTILE_TOLERANCE < beta);
        self.support[k.min(self.support.len() - 1)].0
    }

    /// Largest single weight: the quantization error of the quantile map.
    pub fn discrete_gap(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest and largest atoms carrying positive weight.
    pub fn support_range(&self) -> (f64, f64) {
        (self.support[0].0, self.support[self.support.len() - 1].0)
    }
}

/// First-coordinate offsets `[X_i]_0 - [x]_0` and kernel profile values of
/// every predictor row against the query.
pub fn balance_inputs(segments: &SegmentSet, kernel: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
    let query = segments.query();
    let mut diffs = Vec::with_capacity(segments.len());
    let mut kvals = Vec::with_capacity(segments.len());
    for row in segments.predictors() {
        let sq: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        diffs.push(row[0] - query[0]);
        kvals.push(kernel.weight_at_sq_distance(sq));
    }
    (diffs, kvals)
}

/// Fits the reweighted estimator at the segment set's query row.
pub fn fit_rnw(segments: &SegmentSet, kernel: &KernelSpec) -> Result<RnwFit> {
    fit_rnw_with(segments, kernel, Reweighting::EmpiricalLikelihood)
}

pub fn fit_rnw_with(
    segments: &SegmentSet,
    kernel: &KernelSpec,
    reweighting: Reweighting,
) -> Result<RnwFit> {
    let (diffs, kvals) = balance_inputs(segments, kernel);
    fit_from_parts(&diffs, &kvals, segments.responses(), reweighting)
}

/// Fits from precomputed first-coordinate offsets and kernel values.
///
/// Kernel values may carry any common positive scale.
pub fn fit_from_parts(
    offsets: &[f64],
    kernel_values: &[f64],
    responses: &[f64],
    reweighting: Reweighting,
) -> Result<RnwFit> {
    let n = responses.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if responses.len() != offsets.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: offsets.len(),
        });
    }
    if let Some(index) = responses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let raw = raw_weights(offsets, kernel_values, reweighting)?;
    Ok(RnwFit::assemble(
        raw.lambda,
        raw.adjustment,
        raw.weights,
        responses.to_vec(),
        kernel_values.to_vec(),
        raw.balance,
        raw.degenerate,
    ))
}

/// Weights of a fit without the sorted support.
pub(crate) struct RawWeights {
    pub lambda: f64,
    pub adjustment: Vec<f64>,
    pub weights: Vec<f64>,
    pub balance: Vec<f64>,
    pub degenerate: bool,
}

pub(crate) fn raw_weights(offsets: &[f64], kernel_values: &[f64], reweighting: Reweighting) -> Result<RawWeights> {
    let n = offsets.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if kernel_values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: kernel_values.len(),
        });
    }
    if let Some(index) = kernel_values.iter().position(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(invalid(
            "kernel_values",
            format!("entry {index} is negative or non-finite"),
        ));
    }

    let balance: Vec<f64> = offsets
        .iter()
        .zip(kernel_values)
        .map(|(d, k)| d * k)
        .collect();
    let uniform = vec![1.0 / n as f64; n];

    if kernel_values.iter().all(|&k| k == 0.0) {
        return Ok(RawWeights {
            lambda: 0.0,
            adjustment: uniform.clone(),
            weights: uniform,
            balance,
            degenerate: true,
        });
    }

    let solution = match reweighting {
        Reweighting::EmpiricalLikelihood => solve_lambda(&balance, LAMBDA_TOLERANCE)?,
        Reweighting::PlainNw => LambdaSolution {
            lambda: 0.0,
            degenerate: false,
        },
    };
    let lambda = solution.lambda;

    let (adjustment, weights) = if lambda == 0.0 {
        let total: f64 = kernel_values.iter().sum();
        let weights = kernel_values.iter().map(|k| k / total).collect();
        (uniform, weights)
    } else {
        let mut p: Vec<f64> = balance
            .iter()
            .map(|s| 1.0 / (n as f64 * (1.0 + lambda * s)))
            .collect();
        let p_total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= p_total);
        let mass: Vec<f64> = p.iter().zip(kernel_values).map(|(p, k)| p * k).collect();
        let total: f64 = mass.iter().sum();
        let weights = mass.iter().map(|m| m / total).collect();
        (p, weights)
    };
    Ok(RawWeights {
        lambda,
        adjustment,
        weights,
        balance,
        degenerate: solution.degenerate,
    })
}

impl RnwFit {
    fn assemble(
        lambda: f64,
        adjustment: Vec<f64>,
        weights: Vec<f64>,
        responses: Vec<f64>,
        kernel_values: Vec<f64>,
        balance: Vec<f64>,
        degenerate: bool,
    ) -> Self {
        let support = cumulative_support(&responses, &weights);
        Self {
            lambda,
            adjustment,
            weights,
            responses,
            kernel_values,
            balance,
            degenerate,
            support,
        }
    }
}

fn cumulative_support(values: &[f64], weights: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (v, w))
        .collect();
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut support: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    let mut cum = 0.0;
    for (v, w) in atoms {
        cum += w;
        match support.last_mut() {
            Some(last) if last.0 == v => last.1 = cum,
            _ => support.push((v, cum)),
        }
    }
    support
}
