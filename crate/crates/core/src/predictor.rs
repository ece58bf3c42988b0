//! Point predictors producing `yhat_t` from the `d` previous values.
//!
//! Feature vectors are ordered most recent first: `x_t = (y_{t-1}, ..., y_{t-d})`.
//! The conformal layer treats the fitted model as fixed and never refits it
//! while streaming.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

/// CART ensemble settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 10,
            max_depth: 8,
            min_leaf: 3,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictorKind {
    LagLeastSquares { ridge: f64 },
    RandomForest(ForestParams),
    /// Precomputed predictions read from a `t,yhat` CSV file.
    External { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    /// Number of lagged values in each feature vector.
    pub lags: usize,
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lags == 0 {
            return Err(invalid("lags", "must be at least 1"));
        }
        match &self.kind {
            PredictorKind::LagLeastSquares { ridge } if !(*ridge >= 0.0) => {
                Err(invalid("ridge", "must be nonnegative"))
            }
            PredictorKind::RandomForest(p) if p.trees == 0 => Err(invalid("trees", "must be at least 1")),
            PredictorKind::RandomForest(p) if p.min_leaf == 0 => {
                Err(invalid("min_leaf", "must be at least 1"))
            }
            PredictorKind::RandomForest(p) if p.max_features == Some(0) => {
                Err(invalid("max_features", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Lag vector for time index `t` (most recent first), if `t >= d`.
pub fn lag_vector(series: &[f64], t: usize, d: usize) -> Option<Vec<f64>> {
    (t >= d && t <= series.len()).then(|| series[t - d..t].iter().rev().copied().collect())
}

/// Row-major lag design for targets `t in [d, series.len())`.
pub fn lag_design(series: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(series.len().saturating_sub(d) * d);
    let mut y = Vec::with_capacity(series.len().saturating_sub(d));
    for t in d..series.len() {
        x.extend(series[t - d..t].iter().rev());
        y.push(series[t]);
    }
    (x, y)
}

/// A trained (or loaded) point predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedPredictor {
    Linear(LinearModel),
    Forest(RandomForest),
    External(ExternalPredictions),
}

impl FittedPredictor {
    pub fn lags(&self) -> usize {
        match self {
            FittedPredictor::Linear(m) => m.coefficients.len(),
            FittedPredictor::Forest(f) => f.features,
            FittedPredictor::External(e) => e.lags,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.lags() {
            return Err(Error::DimensionMismatch {
                expected: self.lags(),
                actual: x.len(),
            });
        }
        match self {
            FittedPredictor::Linear(m) => Ok(m.predict(x)),
            FittedPredictor::Forest(f) => Ok(f.predict(x)),
            FittedPredictor::External(_) => Err(Error::State(
                "external predictions are looked up by time index".into(),
            )),
        }
    }

    /// Prediction for time index `t` of `series`.
    pub fn predict_at(&self, series: &[f64], t: usize) -> Result<f64> {
        if let FittedPredictor::External(e) = self {
            return e.at(t);
        }
        let x = lag_vector(series, t, self.lags()).ok_or_else(|| {
            Error::InsufficientData(format!("time index {t} has fewer than {} lags", self.lags()))
        })?;
        self.predict(&x)
    }

    pub fn predict_range(&self, series: &[f64], range: std::ops::Range<usize>) -> Result<Vec<f64>> {
        range.map(|t| self.predict_at(series, t)).collect()
    }

    /// Residuals `y_t - yhat_t` on the training series for `t in [d, len)`.
    /// A forest uses out-of-bag predictions so that the residuals are not
    /// shrunk by memorization; other predictors use their plain fit.
    pub fn training_residuals(&self, train: &[f64]) -> Result<Vec<f64>> {
        let d = self.lags();
        if train.len() <= d {
            return Err(Error::InsufficientData(format!(
                "training series of length {} has no rows with {d} lags",
                train.len()
            )));
        }
        let fitted = match self {
            FittedPredictor::Forest(f) => {
                let (x, y) = lag_design(train, d);
                if f.in_bag.first().map(Vec::len) != Some(y.len()) {
                    return Err(Error::DimensionMismatch {
                        expected: f.in_bag.first().map_or(0, Vec::len),
                        actual: y.len(),
                    });
                }
                f.oob_predictions(&x)
            }
            _ => self.predict_range(train, d..train.len())?,
        };
        Ok(train[d..].iter().zip(fitted).map(|(y, f)| y - f).collect())
    }
}

/// Fits the predictor on `series` (all of it is training data).
pub fn fit(spec: &PredictorSpec, series: &[f64], seed: u64) -> Result<FittedPredictor> {
    spec.validate()?;
    if let PredictorKind::External { path } = &spec.kind {
        return Ok(FittedPredictor::External(ExternalPredictions::load(path, spec.lags)?));
    }
    let d = spec.lags;
    if series.len() <= d + 10 {
        return Err(Error::InsufficientData(format!(
            "training series of length {} needs more than {} values",
            series.len(),
            d + 10
        )));
    }
    if let Some(index) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (x, y) = lag_design(series, d);
    match &spec.kind {
        PredictorKind::LagLeastSquares { ridge } => Ok(FittedPredictor::Linear(LinearModel::fit(&x, &y, d, *ridge)?)),
        PredictorKind::RandomForest(params) => Ok(FittedPredictor::Forest(RandomForest::fit(&x, &y, d, params, seed))),
        PredictorKind::External { .. } => unreachable!(),
    }
}

/// Linear autoregression with unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    fn fit(x: &[f64], y: &[f64], d: usize, ridge: f64) -> Result<Self> {
        let m = y.len();
        let design = DMatrix::from_row_slice(m, d, x);
        let x_mean: Vec<f64> = (0..d).map(|j| design.column(j).mean()).collect();
        let y_mean = y.iter().sum::<f64>() / m as f64;
        let extra = if ridge > 0.0 { d } else { 0 };
        let mut a = DMatrix::<f64>::zeros(m + extra, d);
        let mut b = DVector::<f64>::zeros(m + extra);
        for i in 0..m {
            for j in 0..d {
                a[(i, j)] = design[(i, j)] - x_mean[j];
            }
            b[i] = y[i] - y_mean;
        }
        for j in 0..extra {
            a[(m + j, j)] = ridge.sqrt();
        }
        let svd = a.svd(true, true);
        let scale = svd.singular_values.max();
        let beta = svd
            .solve(&b, 1e-12 * scale.max(f64::MIN_POSITIVE))
            .map_err(|e| invalid("design", e.to_string()))?;
        let coefficients: Vec<f64> = beta.iter().copied().collect();
        let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
        Ok(Self {
            intercept,
            coefficients,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Single CART regression tree stored as a flat node arena.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    y: &'a [f64],
    d: usize,
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf(mean));
        let constant = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf || constant {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows, rng) else {
            return id;
        };
        let mut split = 0;
        for k in 0..rows.len() {
            if self.x[rows[k] * self.d + feature] <= threshold {
                rows.swap(k, split);
                split += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(split);
        let left = self.build(left_rows, depth + 1, rng);
        let right = self.build(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Variance-reduction split over a random feature subset.
    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let m = rows.len();
        let min_leaf = self.params.min_leaf;
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let base = total * total / m as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
        let mut features = sample(rng, self.d, self.mtry).into_vec();
        features.sort_unstable();
        for feature in features {
            order.clear();
            order.extend(rows.iter().map(|&r| (self.x[r * self.d + feature], r)));
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut left_sum = 0.0;
            for k in 1..m {
                left_sum += self.y[order[k - 1].1];
                if k < min_leaf || m - k < min_leaf || order[k - 1].0 == order[k].0 {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (m - k) as f64 - base;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let threshold = 0.5 * (order[k - 1].0 + order[k].0);
                    best = Some((score, feature, threshold));
                }
            }
        }
        best.filter(|(s, _, _)| *s > 1e-12 * base.abs().max(1.0))
            .map(|(_, f, t)| (f, t))
    }
}

/// Bagged CART ensemble with per-split feature subsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
    features: usize,
    /// Per tree, whether each training row was drawn into its bootstrap sample.
    in_bag: Vec<Vec<bool>>,
}

impl RandomForest {
    pub fn fit(x: &[f64], y: &[f64], d: usize, params: &ForestParams, seed: u64) -> Self {
        let m = y.len();
        let mtry = params.max_features.unwrap_or(d.div_ceil(3)).clamp(1, d);
        let mut master = stream(seed, Stream::Bootstrap);
        let tree_seeds: Vec<u64> = (0..params.trees).map(|_| master.random()).collect();
        let (trees, in_bag): (Vec<_>, Vec<_>) = tree_seeds
            .par_iter()
            .map(|&s| {
                let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s);
                let mut rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
                let mut bag = vec![false; m];
                for &r in &rows {
                    bag[r] = true;
                }
                let mut builder = TreeBuilder {
                    x,
                    y,
                    d,
                    params,
                    mtry,
                    nodes: Vec::new(),
                };
                builder.build(&mut rows, 0, &mut rng);
                (
                    RegressionTree {
                        nodes: builder.nodes,
                    },
                    bag,
                )
            })
            .unzip();
        Self {
            trees,
            features: d,
            in_bag,
        }
    }

    /// Out-of-bag prediction for every training row of `x` (the design the
    /// forest was fitted on). Rows that every tree saw fall back to the full
    /// ensemble.
    pub fn oob_predictions(&self, x: &[f64]) -> Vec<f64> {
        let m = self.in_bag.first().map_or(0, Vec::len);
        (0..m)
            .map(|i| {
                let row = &x[i * self.features..(i + 1) * self.features];
                let (sum, count) = self
                    .trees
                    .iter()
                    .zip(&self.in_bag)
                    .filter(|(_, bag)| !bag[i])
                    .fold((0.0, 0usize), |(s, c), (t, _)| (s + t.predict(row), c + 1));
                if count == 0 {
                    self.predict(row)
                } else {
                    sum / count as f64
                }
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }
}

/// Predictions keyed by time index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPredictions {
    by_time: BTreeMap<usize, f64>,
    lags: usize,
}

impl ExternalPredictions {
    pub fn load(path: &Path, lags: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::InsufficientData(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::InsufficientData(format!("{}: {e}", path.display())))?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(tc), Some(yc)) = (col("t"), col("yhat")) else {
            return Err(Error::InsufficientData(format!(
                "{}: expected header `t,yhat`",
                path.display()
            )));
        };
        let mut by_time = BTreeMap::new();
        for (k, record) in reader.records().enumerate() {
            let row = k + 2;
            let record = record.map_err(|e| Error::InsufficientData(format!("row {row}: {e}")))?;
            let t: usize = record
                .get(tc)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InsufficientData(format!("row {row}: bad `t`")))?;
            let v: f64 = record
                .get(yc)
                .and_then(|s| s.trim().parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::InsufficientData(format!("row {row}: bad `yhat`")))?;
            by_time.insert(t, v);
        }
        Ok(Self { by_time, lags })
    }

    pub fn from_map(by_time: BTreeMap<usize, f64>) -> Self {
        Self { by_time, lags: 1 }
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        self.by_time
            .get(&t)
            .copied()
            .ok_or_else(|| Error::InsufficientData(format!("no external prediction for t = {t}")))
    }
}
