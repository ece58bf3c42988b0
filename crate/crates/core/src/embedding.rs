//! Residual history buffer and its sliding-window segmentation.
//!
//! A full history of `T` residuals `(e_1, ..., e_T)` (oldest first) is cut
//! into `n = T - w` overlapping predictor rows
//! `X_i = (e_{i+w-1}, ..., e_i)` with responses `Y_i = e_{i+w}`, plus the
//! query row `(e_T, ..., e_{T-w+1})`. Coordinate 0 of every row is the most
//! recent residual of its window; the balance constraint of the estimator
//! acts on that coordinate.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Smallest admissible number of segments.
pub const MIN_SEGMENTS: usize = 2;

/// Fixed-capacity FIFO of the most recent residuals, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl ResidualHistory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(crate::error::invalid("capacity", "must be positive"));
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        })
    }

    /// Builds a history holding the last `capacity` entries of `values`.
    pub fn from_values(capacity: usize, values: &[f64]) -> Result<Self> {
        let mut h = Self::new(capacity)?;
        for &v in values {
            h.push(v);
        }
        Ok(h)
    }

    /// Appends a residual, evicting the oldest entry when full.
    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.values.len() == self.capacity
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = f64> + ExactSizeIterator + '_ {
        self.values.iter().copied()
    }

    /// The `k` most recent residuals, oldest first.
    pub fn tail(&self, k: usize) -> Vec<f64> {
        let k = k.min(self.values.len());
        self.values.iter().skip(self.values.len() - k).copied().collect()
    }

    /// Cuts the full history into segments of length `w`.
    pub fn segments(&self, w: usize) -> Result<SegmentSet> {
        if !self.is_full() {
            return Err(Error::HistoryNotFull {
                count: self.len(),
                capacity: self.capacity,
            });
        }
        let values = self.values();
        SegmentSet::from_residuals(&values, w)
    }
}

/// Overlapping `(predictor, response)` pairs plus the query segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    w: usize,
    /// `n x w`, row-major.
    predictors: Vec<f64>,
    responses: Vec<f64>,
    query: Vec<f64>,
}

impl SegmentSet {
    /// Segments a residual sequence given oldest first.
    pub fn from_residuals(residuals: &[f64], w: usize) -> Result<Self> {
        let t = residuals.len();
        let max = t.saturating_sub(MIN_SEGMENTS);
        if w == 0 || w > max {
            return Err(Error::WindowOutOfRange {
                w,
                max,
                history: t,
            });
        }
        if let Some(index) = residuals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let n = t - w;
        let mut predictors = Vec::with_capacity(n * w);
        for j in 0..n {
            predictors.extend(residuals[j..j + w].iter().rev());
        }
        let responses = residuals[w..].to_vec();
        let query = residuals[n..].iter().rev().copied().collect();
        Ok(Self {
            w,
            predictors,
            responses,
            query,
        })
    }

    /// Builds a segment set from explicit rows. Rows must all have length
    /// `query.len()`.
    pub fn from_parts(predictors: Vec<Vec<f64>>, responses: Vec<f64>, query: Vec<f64>) -> Result<Self> {
        let w = query.len();
        if w == 0 {
            return Err(crate::error::invalid("query", "must be nonempty"));
        }
        if predictors.len() != responses.len() {
            return Err(Error::DimensionMismatch {
                expected: predictors.len(),
                actual: responses.len(),
            });
        }
        if predictors.len() < MIN_SEGMENTS {
            return Err(Error::InsufficientData(format!(
                "need at least {MIN_SEGMENTS} segments, got {}",
                predictors.len()
            )));
        }
        let mut flat = Vec::with_capacity(predictors.len() * w);
        for row in &predictors {
            if row.len() != w {
                return Err(Error::DimensionMismatch {
                    expected: w,
                    actual: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Ok(Self {
            w,
            predictors: flat,
            responses,
            query,
        })
    }

    pub fn window(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn predictor(&self, i: usize) -> &[f64] {
        &self.predictors[i * self.w..(i + 1) * self.w]
    }

    pub fn predictors(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.predictors.chunks_exact(self.w)
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    /// Residual sequence recovered from the first window and the responses.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.predictor(0).iter().rev().copied().collect();
        out.extend_from_slice(&self.responses);
        out
    }
}
