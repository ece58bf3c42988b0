//! Bandwidth selection by the corrected nonparametric AIC.
//!
//! The estimator is a linear smoother: row `i` of `S` holds the weights the
//! fit places on every stored response when queried at `X_i` itself. With
//! `RSS = sum_i (Y_i - (S Y)_i)^2` and degrees of freedom `tr(S S^T)`,
//!
//! ```text
//! AIC_C(h) = log(RSS) + (n + tr(S S^T)) / (n - (tr(S S^T) + 2))
//! ```
//!
//! is minimized over a log-spaced grid of bandwidths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::SegmentSet;
use crate::error::{invalid, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::rnw::{raw_weights, Reweighting};

/// Dense smoother matrix with its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherMatrix {
    n: usize,
    entries: Vec<f64>,
    trace_sst: f64,
    rss: f64,
}

impl SmootherMatrix {
    /// Assembles a smoother from explicit rows and the responses it smooths.
    pub fn from_rows(rows: Vec<Vec<f64>>, responses: &[f64]) -> Result<Self> {
        let n = rows.len();
        if responses.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(invalid("rows", "smoother must be square and match the responses"));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Self::assemble(n, entries, responses))
    }

    fn assemble(n: usize, entries: Vec<f64>, responses: &[f64]) -> Self {
        let trace_sst = entries.iter().map(|v| v * v).sum();
        let rss = entries
            .chunks_exact(n)
            .zip(responses)
            .map(|(row, y)| {
                let fitted: f64 = row.iter().zip(responses).map(|(s, y)| s * y).sum();
                (y - fitted) * (y - fitted)
            })
            .sum();
        Self {
            n,
            entries,
            trace_sst,
            rss,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// `tr(S S^T)`.
    pub fn trace_sst(&self) -> f64 {
        self.trace_sst
    }

    pub fn rss(&self) -> f64 {
        self.rss
    }
}

/// Pairwise squared distances and first-coordinate offsets between all
/// predictor rows; shared by every bandwidth on a grid.
struct Geometry<'a> {
    segments: &'a SegmentSet,
    sq_dist: Vec<f64>,
}

impl<'a> Geometry<'a> {
    fn new(segments: &'a SegmentSet) -> Self {
        let n = segments.len();
        let mut sq_dist = vec![0.0; n * n];
        for i in 0..n {
            let a = segments.predictor(i);
            for j in (i + 1)..n {
                let b = segments.predictor(j);
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                sq_dist[i * n + j] = d;
                sq_dist[j * n + i] = d;
            }
        }
        Self { segments, sq_dist }
    }

    fn smoother(&self, kernel: &KernelSpec, reweighting: Reweighting) -> Result<SmootherMatrix> {
        let n = self.segments.len();
        let responses = self.segments.responses();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let q0 = self.segments.predictor(i)[0];
                let offsets: Vec<f64> = self.segments.predictors().map(|r| r[0] - q0).collect();
                let kvals: Vec<f64> = self.sq_dist[i * n..(i + 1) * n]
                    .iter()
                    .map(|&d| kernel.weight_at_sq_distance(d))
                    .collect();
                raw_weights(&offsets, &kvals, reweighting).map(|r| r.weights)
            })
            .collect::<Result<_>>()?;
        Ok(SmootherMatrix::assemble(n, rows.into_iter().flatten().collect(), responses))
    }
}

/// Row `i` is the weight vector of the fit queried at predictor row `i`
/// (the row itself stays among the atoms).
pub fn build_smoother(segments: &SegmentSet, kernel: &KernelSpec) -> Result<SmootherMatrix> {
    build_smoother_with(segments, kernel, Reweighting::EmpiricalLikelihood)
}

pub fn build_smoother_with(
    segments: &SegmentSet,
    kernel: &KernelSpec,
    reweighting: Reweighting,
) -> Result<SmootherMatrix> {
    Geometry::new(segments).smoother(kernel, reweighting)
}

/// Corrected AIC from its ingredients; `None` marks an inadmissible
/// bandwidth (non-positive denominator or zero RSS).
pub fn aic_value(rss: f64, trace_sst: f64, n: usize) -> Option<f64> {
    let n = n as f64;
    let denom = n - (trace_sst + 2.0);
    if denom <= 0.0 || !(rss > 0.0) || !rss.is_finite() {
        return None;
    }
    Some(rss.ln() + (n + trace_sst) / denom)
}

pub fn aic_c(smoother: &SmootherMatrix, n: usize) -> Option<f64> {
    aic_value(smoother.rss(), smoother.trace_sst(), n)
}

/// Scale anchor `h0 = sd(residuals) * n^{-1/(w+4)}`; a zero spread maps to
/// `h0 = 1` since every bandwidth then yields the same weights.
pub fn rule_of_thumb(residuals: &[f64], n: usize, w: usize) -> f64 {
    let sd = sample_sd(residuals);
    let h = sd * (n.max(1) as f64).powf(-1.0 / (w as f64 + 4.0));
    if h.is_finite() && h > 0.0 {
        h
    } else {
        1.0
    }
}

pub(crate) fn sample_sd(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (m - 1) as f64).sqrt()
}

/// `count` log-spaced points on `[h0 / factor, h0 * factor]`.
pub fn log_grid(h0: f64, count: usize, factor: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![h0];
    }
    let lo = (h0 / factor).ln();
    let hi = (h0 * factor).ln();
    (0..count)
        .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Grid shape relative to the rule-of-thumb anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub count: usize,
    pub factor: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            count: 15,
            factor: 8.0,
        }
    }
}

impl GridSpec {
    pub fn grid_for(&self, segments: &SegmentSet) -> Vec<f64> {
        log_grid(self.anchor(segments), self.count, self.factor)
    }

    pub fn anchor(&self, segments: &SegmentSet) -> f64 {
        rule_of_thumb(&segments.reconstruct(), segments.len(), segments.window())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AicPoint {
    pub bandwidth: f64,
    pub aic: Option<f64>,
    pub trace_sst: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub kernel: KernelSpec,
    pub curve: Vec<AicPoint>,
    /// No grid point was admissible and the rule-of-thumb anchor was used.
    pub fallback: bool,
}

/// Evaluates the AIC curve on `grid` and returns the admissible minimizer
/// (ties toward the smaller bandwidth).
pub fn select_bandwidth(
    segments: &SegmentSet,
    family: KernelFamily,
    grid: &[f64],
) -> Result<BandwidthSelection> {
    select_bandwidth_with(segments, family, grid, Reweighting::EmpiricalLikelihood)
}

pub fn select_bandwidth_with(
    segments: &SegmentSet,
    family: KernelFamily,
    grid: &[f64],
    reweighting: Reweighting,
) -> Result<BandwidthSelection> {
    if grid.is_empty() {
        return Err(invalid("grid", "must be nonempty"));
    }
    let mut grid = grid.to_vec();
    for &h in &grid {
        KernelSpec::new(family, h)?;
    }
    grid.sort_by(f64::total_cmp);
    let geometry = Geometry::new(segments);
    let n = segments.len();
    let curve: Vec<AicPoint> = grid
        .par_iter()
        .map(|&h| {
            let kernel = KernelSpec::new(family, h)?;
            let sm = geometry.smoother(&kernel, reweighting)?;
            Ok(AicPoint {
                bandwidth: h,
                aic: aic_c(&sm, n),
                trace_sst: sm.trace_sst(),
                rss: sm.rss(),
            })
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, f64)> = None;
    for p in &curve {
        if let Some(a) = p.aic {
            if best.is_none_or(|(_, b)| a < b) {
                best = Some((p.bandwidth, a));
            }
        }
    }
    let (h, fallback) = match best {
        Some((h, _)) => (h, false),
        None => (rule_of_thumb(&segments.reconstruct(), n, segments.window()), true),
    };
    Ok(BandwidthSelection {
        kernel: KernelSpec::new(family, h)?,
        curve,
        fallback,
    })
}
