//! Per-dimension moments and outlier-dimension detection.
//!
//! A dimension is an outlier when its variance is at least [`OUTLIER_RATIO`]
//! times the average variance over all dimensions (outliers included). The
//! principal dimension is the one with the largest variance, lowest index on
//! ties, whether or not it crosses the threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::EmbeddingSet;
use crate::par;

pub const OUTLIER_RATIO: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("dimension {dim} out of range for d={dims}")]
    DimOutOfRange { dim: usize, dims: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimStats {
    pub dims: usize,
    pub means: Vec<f64>,
    /// Population variances (divide by n).
    pub variances: Vec<f64>,
    pub mean_variance: f64,
    pub outlier_mask: Vec<bool>,
    pub principal: usize,
}

/// JSON shape of a [`DimStats`] report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub mean_variance: f64,
    pub outlier_dims: Vec<usize>,
    pub principal: usize,
}

pub fn compute_stats(set: &EmbeddingSet) -> DimStats {
    let moments = par::map_range(set.dims(), |dim| column_moments(set.column(dim)));
    DimStats::from_moments(moments)
}

/// Statistics over a subset of rows (e.g. a training sample). Row indices may
/// repeat; `rows` must be non-empty.
pub fn compute_stats_on_rows(set: &EmbeddingSet, rows: &[usize]) -> DimStats {
    assert!(!rows.is_empty(), "row subset must be non-empty");
    let moments = par::map_range(set.dims(), |dim| {
        column_moments(rows.iter().map(|&r| set.value(r, dim)))
    });
    DimStats::from_moments(moments)
}

/// Two-pass mean and population variance.
fn column_moments<I>(values: I) -> (f64, f64)
where
    I: Iterator<Item = f32> + Clone,
{
    let (sum, n) = values
        .clone()
        .fold((0.0f64, 0usize), |(s, n), v| (s + f64::from(v), n + 1));
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (f64::from(v) - mean).powi(2)).sum();
    (mean, ss / n as f64)
}

impl DimStats {
    fn from_moments(moments: Vec<(f64, f64)>) -> Self {
        let (means, variances): (Vec<f64>, Vec<f64>) = moments.into_iter().unzip();
        Self::from_variances(means, variances)
    }

    /// Derives the outlier mask and principal dimension from raw moments.
    pub fn from_variances(means: Vec<f64>, variances: Vec<f64>) -> Self {
        assert_eq!(means.len(), variances.len());
        assert!(!variances.is_empty(), "at least one dimension required");
        let dims = variances.len();
        let mean_variance = variances.iter().sum::<f64>() / dims as f64;
        let threshold = OUTLIER_RATIO * mean_variance;
        // A zero average means every variance is zero: nothing stands out.
        let outlier_mask = variances
            .iter()
            .map(|&v| mean_variance > 0.0 && v >= threshold)
            .collect();
        let principal = argmax_first(&variances);
        Self {
            dims,
            means,
            variances,
            mean_variance,
            outlier_mask,
            principal,
        }
    }

    pub fn outlier_threshold(&self) -> f64 {
        OUTLIER_RATIO * self.mean_variance
    }

    pub fn outlier_dims(&self) -> Vec<usize> {
        self.outlier_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
            .collect()
    }

    pub fn count_outliers(&self) -> usize {
        self.outlier_mask.iter().filter(|&&o| o).count()
    }

    pub fn principal_variance(&self) -> f64 {
        self.variances[self.principal]
    }

    pub fn principal_is_outlier(&self) -> bool {
        self.outlier_mask[self.principal]
    }

    /// Percentage of dimensions whose variance is strictly below that of
    /// `dim`, rounded half-up to an integer.
    pub fn variance_percentile(&self, dim: usize) -> Result<u32, StatsError> {
        let target = *self.variances.get(dim).ok_or(StatsError::DimOutOfRange {
            dim,
            dims: self.dims,
        })?;
        let below = self.variances.iter().filter(|&&v| v < target).count();
        Ok(rounded_percent(below, self.dims))
    }

    /// Percentiles for every dimension, sorting once.
    pub fn variance_percentiles(&self) -> Vec<u32> {
        let mut sorted = self.variances.clone();
        sorted.sort_by(f64::total_cmp);
        self.variances
            .iter()
            .map(|v| rounded_percent(sorted.partition_point(|s| s < v), self.dims))
            .collect()
    }

    pub fn report(&self) -> StatsReport {
        StatsReport {
            means: self.means.clone(),
            variances: self.variances.clone(),
            mean_variance: self.mean_variance,
            outlier_dims: self.outlier_dims(),
            principal: self.principal,
        }
    }
}

pub fn count_outliers(stats: &DimStats) -> usize {
    stats.count_outliers()
}

pub fn variance_percentile(stats: &DimStats, dim: usize) -> Result<u32, StatsError> {
    stats.variance_percentile(dim)
}

/// Element-wise mean of per-run mean vectors, used for averaged activation
/// diagrams. All inputs must share `d`.
pub fn average_means(stats: &[DimStats]) -> Vec<f64> {
    let Some(first) = stats.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.dims];
    for s in stats {
        assert_eq!(s.dims, first.dims, "runs must share d");
        for (a, m) in acc.iter_mut().zip(&s.means) {
            *a += m;
        }
    }
    acc.iter_mut().for_each(|a| *a /= stats.len() as f64);
    acc
}

fn rounded_percent(count: usize, total: usize) -> u32 {
    ((200 * count + total) / (2 * total)) as u32
}

/// Index of the maximum value, lowest index on ties.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
