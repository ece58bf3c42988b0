//! Window-length selection.
//!
//! Two routes: validation-split selection (smallest mean width among
//! candidates reaching the target coverage) and a per-step adaptive rule
//! that compares the most recent `w` residuals with the `w` before them by a
//! two-sample Kolmogorov-Smirnov test and takes the smallest `w` whose
//! p-value falls below the threshold.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::ResidualHistory;
use crate::error::{invalid, Error, Result};

/// Largest `n_a + n_b` handled by the exact lattice-path p-value.
pub const EXACT_KS_MAX_TOTAL: usize = 600;

/// `D = sup_x |F_a(x) - F_b(x)|`, evaluated at every merged sample point.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = match a[i].total_cmp(&b[j]) {
            Ordering::Greater => b[j],
            _ => a[i],
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic two-sided p-value from the Kolmogorov distribution:
/// `2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 z^2)` with
/// `z = D sqrt(n_a n_b / (n_a + n_b))`, clamped to `[0, 1]`.
pub fn ks_pvalue(d: f64, n_a: usize, n_b: usize) -> f64 {
    let z = d * ((n_a * n_b) as f64 / (n_a + n_b) as f64).sqrt();
    kolmogorov_tail(z)
}

/// `2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 z^2)`, clamped to `[0, 1]`.
pub fn kolmogorov_tail(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=1000u32 {
        let term = (-2.0 * f64::from(j * j) * z * z).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Exact two-sided p-value `P(D >= d)` under the permutation null, by
/// counting monotone lattice paths that stay strictly inside the band
/// `|i/n_a - j/n_b| < d`. Falls back to [`ks_pvalue`] for large samples.
pub fn ks_pvalue_exact(d: f64, n_a: usize, n_b: usize) -> f64 {
    if n_a == 0 || n_b == 0 {
        return 1.0;
    }
    if d <= 0.0 {
        return 1.0;
    }
    if n_a + n_b > EXACT_KS_MAX_TOTAL {
        return ks_pvalue(d, n_a, n_b);
    }
    let (m, n) = (n_a as f64, n_b as f64);
    let outside = |i: usize, j: usize| (i as f64 / m - j as f64 / n).abs() >= d - 1e-12;
    // Path counts normalized by the number of paths so far: each step from
    // (i, j) to (i+1, j) or (i, j+1) is taken with the hypergeometric
    // probability of drawing the next point from a or b.
    let mut prob = vec![0.0f64; n_b + 1];
    for i in 0..=n_a {
        for j in 0..=n_b {
            let v = if i == 0 && j == 0 {
                1.0
            } else if outside(i, j) {
                0.0
            } else {
                let remaining = (n_a + n_b - (i + j - 1)) as f64;
                let from_a = if i > 0 {
                    // prob[j] still holds row i-1
                    prob[j] * (n_a - (i - 1)) as f64 / remaining
                } else {
                    0.0
                };
                let from_b = if j > 0 {
                    prob[j - 1] * (n_b - (j - 1)) as f64 / remaining
                } else {
                    0.0
                };
                from_a + from_b
            };
            prob[j] = v;
        }
    }
    (1.0 - prob[n_b]).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    /// Exact permutation distribution for small blocks.
    #[default]
    Exact,
    Asymptotic,
}

impl PValueMethod {
    pub fn pvalue(self, d: f64, n_a: usize, n_b: usize) -> f64 {
        match self {
            PValueMethod::Exact => ks_pvalue_exact(d, n_a, n_b),
            PValueMethod::Asymptotic => ks_pvalue(d, n_a, n_b),
        }
    }
}

/// How the window length is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum WindowPolicy {
    Fixed {
        w: usize,
    },
    Cv {
        candidates: Vec<usize>,
    },
    Adaptive {
        candidates: Vec<usize>,
        #[serde(default = "default_threshold")]
        p_threshold: f64,
        #[serde(default)]
        pvalue: PValueMethod,
    },
}

fn default_threshold() -> f64 {
    0.01
}

/// `{5, 10, 15, ..., min(100, history / 2)}`.
pub fn default_candidates(history: usize) -> Vec<usize> {
    let top = 100.min(history / 2);
    (1..).map(|k| 5 * k).take_while(|&w| w <= top).collect()
}

impl WindowPolicy {
    pub fn candidates(&self) -> Vec<usize> {
        match self {
            WindowPolicy::Fixed { w } => vec![*w],
            WindowPolicy::Cv { candidates } | WindowPolicy::Adaptive { candidates, .. } => {
                candidates.clone()
            }
        }
    }

    /// Checks the policy against a history length `history`.
    pub fn validate(&self, history: usize) -> Result<()> {
        let candidates = self.candidates();
        if candidates.is_empty() {
            return Err(invalid("candidates", "must be nonempty"));
        }
        if candidates.windows(2).any(|p| p[0] >= p[1]) {
            return Err(invalid("candidates", "must be strictly increasing"));
        }
        let max = history.saturating_sub(2);
        for &w in &candidates {
            if w == 0 || w > max {
                return Err(Error::WindowOutOfRange { w, max, history });
            }
        }
        if let WindowPolicy::Adaptive {
            p_threshold,
            candidates,
            ..
        } = self
        {
            if !(*p_threshold > 0.0 && *p_threshold < 1.0) {
                return Err(invalid("p_threshold", "must lie in (0, 1)"));
            }
            let largest = *candidates.last().unwrap_or(&0);
            if 2 * largest > history {
                return Err(Error::WindowOutOfRange {
                    w: largest,
                    max: history / 2,
                    history,
                });
            }
        }
        Ok(())
    }
}

/// Smallest candidate whose recent block differs significantly from the
/// block before it; the largest candidate when none does.
pub fn adaptive_window(
    history: &ResidualHistory,
    candidates: &[usize],
    p_threshold: f64,
    method: PValueMethod,
) -> Result<usize> {
    adaptive_window_on(&history.values(), candidates, p_threshold, method)
}

/// [`adaptive_window`] over a residual slice given oldest first.
pub fn adaptive_window_on(
    residuals: &[f64],
    candidates: &[usize],
    p_threshold: f64,
    method: PValueMethod,
) -> Result<usize> {
    let Some(&largest) = candidates.last() else {
        return Err(invalid("candidates", "must be nonempty"));
    };
    let t = residuals.len();
    if let Some(&w) = candidates.iter().find(|&&w| w == 0 || 2 * w > t) {
        return Err(Error::WindowOutOfRange {
            w,
            max: t / 2,
            history: t,
        });
    }
    for &w in candidates {
        let recent = &residuals[t - w..];
        let previous = &residuals[t - 2 * w..t - w];
        let d = ks_statistic(recent, previous)?;
        if method.pvalue(d, w, w) < p_threshold {
            return Ok(w);
        }
    }
    Ok(largest)
}

/// Validation outcome of one candidate window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub w: usize,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub w: usize,
    pub table: Vec<CvScore>,
    /// No candidate reached the target coverage.
    pub under_covered: bool,
}

/// Runs `evaluate` for every candidate and picks the narrowest one among
/// those with coverage at least `1 - alpha`; without such a candidate, the
/// one with the highest coverage (ties toward smaller `w`).
pub fn cv_window<F>(candidates: &[usize], alpha: f64, evaluate: F) -> Result<CvSelection>
where
    F: Fn(usize) -> Result<(f64, f64)> + Sync,
{
    if candidates.is_empty() {
        return Err(invalid("candidates", "must be nonempty"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let table: Vec<CvScore> = sorted
        .par_iter()
        .map(|&w| {
            evaluate(w).map(|(coverage, mean_width)| CvScore {
                w,
                coverage,
                mean_width,
            })
        })
        .collect::<Result<_>>()?;
    Ok(pick_window(table, 1.0 - alpha))
}

fn pick_window(table: Vec<CvScore>, target: f64) -> CvSelection {
    let covering = table
        .iter()
        .filter(|s| s.coverage >= target - 1e-12)
        .fold(None::<&CvScore>, |best, s| match best {
            Some(b) if b.mean_width <= s.mean_width => Some(b),
            _ => Some(s),
        });
    let (w, under_covered) = match covering {
        Some(s) => (s.w, false),
        None => {
            let best = table
                .iter()
                .fold(None::<&CvScore>, |best, s| match best {
                    Some(b) if b.coverage >= s.coverage => Some(b),
                    _ => Some(s),
                })
                .expect("nonempty table");
            (best.w, true)
        }
    };
    CvSelection {
        w,
        table,
        under_covered,
    }
}
