//! Single-dimension linear-threshold classifier.
//!
//! For a dimension `k`, the rule predicts label 0 when `x[k] <= mu + eps` and
//! label 1 otherwise. `mu` is the mean of `x[k]` over a seeded training sample
//! and `eps` is picked from a fixed grid (default `-50.0..=50.0` in steps of
//! `0.5`) to maximise training accuracy over the full training split. If the
//! inverted rule does strictly better at an offset, the rule is flipped there.
//!
//! Accuracy at every grid point is computed from one sort of the column, so a
//! fit costs `O(n log n + grid)` rather than `O(n * grid)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corr;
use crate::dimstats::{self, argmax_first, compute_stats_on_rows};
use crate::embstore::EmbeddingSet;
use crate::par;

pub const DEFAULT_SAMPLE_SIZE: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("training data contains only class {present}; both labels are required to fit a threshold")]
    SingleClass { present: u8 },
    #[error("dimension {dim} out of range for d={dims}")]
    DimOutOfRange { dim: usize, dims: usize },
    #[error("train has d={train} but validation has d={val}")]
    DimMismatch { train: usize, val: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("invalid epsilon grid: {0}")]
    Grid(String),
    #[error("full-model accuracy must be positive, got {0}")]
    NonPositiveFull(f64),
}

/// Offsets tried around the sample mean, ascending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for EpsilonGrid {
    fn default() -> Self {
        Self {
            min: -50.0,
            max: 50.0,
            step: 0.5,
        }
    }
}

impl EpsilonGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self, FitError> {
        let grid = Self { min, max, step };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(FitError::Grid("bounds and step must be finite".into()));
        }
        if self.step <= 0.0 {
            return Err(FitError::Grid(format!("step must be positive, got {}", self.step)));
        }
        if self.max < self.min {
            return Err(FitError::Grid(format!("max {} is below min {}", self.max, self.min)));
        }
        if (self.max - self.min) / self.step > 10_000_000.0 {
            return Err(FitError::Grid("more than 10^7 grid points".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        // Tolerate representation error so that e.g. max=50, step=0.5 lands on 50.
        ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.min + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub sample_size: usize,
    pub sample_seed: u64,
    pub grid: EpsilonGrid,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            sample_size: DEFAULT_SAMPLE_SIZE,
            sample_seed: 0,
            grid: EpsilonGrid::default(),
        }
    }
}

impl FitOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            sample_seed: seed,
            ..Self::default()
        }
    }
}

/// A fitted threshold on one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub dim: usize,
    pub mu: f64,
    pub epsilon: f64,
    pub flipped: bool,
    pub train_accuracy: f64,
}

impl ThresholdRule {
    pub fn threshold(&self) -> f64 {
        self.mu + self.epsilon
    }

    /// Label predicted for a value in `self.dim`. Values equal to the
    /// threshold fall on the `<=` side.
    pub fn predict(&self, value: f64) -> u8 {
        let above = value > self.threshold();
        u8::from(above != self.flipped)
    }
}

/// Seeded uniform sample without replacement of `min(size, n)` row indices,
/// sorted ascending. Returns every row when `size >= n`.
pub fn sample_rows(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, size).into_vec();
    rows.sort_unstable();
    rows
}

fn check_trainable(train: &EmbeddingSet, opts: &FitOptions) -> Result<(), FitError> {
    opts.grid.validate()?;
    if opts.sample_size == 0 {
        return Err(FitError::EmptySample);
    }
    if !train.has_both_classes() {
        return Err(FitError::SingleClass {
            present: train.labels()[0],
        });
    }
    Ok(())
}

fn check_dim(dim: usize, set: &EmbeddingSet) -> Result<(), FitError> {
    if dim >= set.dims() {
        return Err(FitError::DimOutOfRange { dim, dims: set.dims() });
    }
    Ok(())
}

/// Fits the threshold rule on `dim`, estimating `mu` from a seeded sample of
/// `opts.sample_size` training rows and scoring each offset on all rows.
pub fn fit_rule(train: &EmbeddingSet, dim: usize, opts: &FitOptions) -> Result<ThresholdRule, FitError> {
    check_trainable(train, opts)?;
    check_dim(dim, train)?;
    let sample = sample_rows(train.rows(), opts.sample_size, opts.sample_seed);
    Ok(fit_with_sample(train, dim, &sample, &opts.grid))
}

fn fit_with_sample(train: &EmbeddingSet, dim: usize, sample: &[usize], grid: &EpsilonGrid) -> ThresholdRule {
    let mu = sample.iter().map(|&r| f64::from(train.value(r, dim))).sum::<f64>() / sample.len() as f64;
    let values: Vec<f64> = train.column(dim).map(f64::from).collect();
    let best = search_grid(&values, train.labels(), mu, &grid.values());
    ThresholdRule {
        dim,
        mu,
        epsilon: best.epsilon,
        flipped: best.flipped,
        train_accuracy: best.correct as f64 / values.len() as f64,
    }
}

struct GridBest {
    epsilon: f64,
    flipped: bool,
    correct: usize,
}

/// Scores every offset in `epsilons` (ascending) against `values`/`labels`.
/// Each offset is worth `max(c, n - c)` correct rows, where `c` counts rows
/// the unflipped rule gets right; the first offset reaching the best score wins.
fn search_grid(values: &[f64], labels: &[u8], mu: f64, epsilons: &[f64]) -> GridBest {
    let n = values.len();
    let mut sorted: Vec<(f64, u8)> = values.iter().copied().zip(labels.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ones_total = labels.iter().filter(|&&l| l == 1).count();

    let (mut pos, mut zeros_le, mut ones_le) = (0, 0, 0);
    let mut best = GridBest {
        epsilon: epsilons[0],
        flipped: false,
        correct: 0,
    };
    let mut best_score = None;
    for &eps in epsilons {
        let threshold = mu + eps;
        while pos < n && sorted[pos].0 <= threshold {
            if sorted[pos].1 == 1 {
                ones_le += 1;
            } else {
                zeros_le += 1;
            }
            pos += 1;
        }
        let correct = zeros_le + (ones_total - ones_le);
        let inverted = n - correct;
        let score = correct.max(inverted);
        if best_score.is_none_or(|b| score > b) {
            best_score = Some(score);
            best = GridBest {
                epsilon: eps,
                flipped: inverted > correct,
                correct: score,
            };
        }
    }
    best
}

/// Accuracy of `rule` on `set`.
pub fn apply_rule(rule: &ThresholdRule, set: &EmbeddingSet) -> Result<f64, FitError> {
    check_dim(rule.dim, set)?;
    let correct = set
        .column(rule.dim)
        .zip(set.labels())
        .filter(|(v, &label)| rule.predict(f64::from(*v)) == label)
        .count();
    Ok(correct as f64 / set.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalEvaluation {
    pub rho: usize,
    /// Whether `rho` crosses the outlier threshold in the training sample.
    pub rho_is_outlier: bool,
    pub rule: ThresholdRule,
    pub val_accuracy: f64,
}

fn check_pair(train: &EmbeddingSet, val: &EmbeddingSet) -> Result<(), FitError> {
    if train.dims() != val.dims() {
        return Err(FitError::DimMismatch {
            train: train.dims(),
            val: val.dims(),
        });
    }
    Ok(())
}

/// Picks the principal dimension of the training sample (the same sample that
/// estimates `mu`), fits the rule on it and scores it on `val`.
pub fn evaluate_principal(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    opts: &FitOptions,
) -> Result<PrincipalEvaluation, FitError> {
    check_pair(train, val)?;
    check_trainable(train, opts)?;
    let sample = sample_rows(train.rows(), opts.sample_size, opts.sample_seed);
    let sample_stats = compute_stats_on_rows(train, &sample);
    let rho = sample_stats.principal;
    let rule = fit_with_sample(train, rho, &sample, &opts.grid);
    let val_accuracy = apply_rule(&rule, val)?;
    Ok(PrincipalEvaluation {
        rho,
        rho_is_outlier: sample_stats.outlier_mask[rho],
        rule,
        val_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub dim: usize,
    pub variance: f64,
    pub variance_percentile: u32,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_dim: Vec<SweepRecord>,
    pub best_dim: usize,
    pub correlation_pearson: Option<f64>,
    pub correlation_spearman: Option<f64>,
    /// Outlier threshold (5x mean variance) of the validation set.
    pub outlier_threshold: f64,
}

impl SweepResult {
    pub fn best(&self) -> &SweepRecord {
        &self.per_dim[self.best_dim]
    }

    /// `dim,variance,variance_percentile,val_accuracy` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,variance,variance_percentile,val_accuracy\n");
        for r in &self.per_dim {
            out.push_str(&format!("{},{:?},{},{:?}\n", r.dim, r.variance, r.variance_percentile, r.val_accuracy));
        }
        out
    }
}

/// Fits and scores the rule on every dimension. Variances and percentiles come
/// from the validation set.
pub fn sweep_all_dims(train: &EmbeddingSet, val: &EmbeddingSet, opts: &FitOptions) -> Result<SweepResult, FitError> {
    check_pair(train, val)?;
    check_trainable(train, opts)?;
    let sample = sample_rows(train.rows(), opts.sample_size, opts.sample_seed);
    let val_stats = dimstats::compute_stats(val);
    let percentiles = val_stats.variance_percentiles();

    let per_dim: Vec<SweepRecord> = par::map_range(train.dims(), |dim| {
        let rule = fit_with_sample(train, dim, &sample, &opts.grid);
        SweepRecord {
            dim,
            variance: val_stats.variances[dim],
            variance_percentile: percentiles[dim],
            val_accuracy: apply_rule(&rule, val).expect("dimension checked"),
            train_accuracy: rule.train_accuracy,
        }
    });

    let accuracies: Vec<f64> = per_dim.iter().map(|r| r.val_accuracy).collect();
    let best_dim = argmax_first(&accuracies);
    Ok(SweepResult {
        best_dim,
        correlation_pearson: corr::pearson(&val_stats.variances, &accuracies),
        correlation_spearman: corr::spearman(&val_stats.variances, &accuracies),
        outlier_threshold: val_stats.outlier_threshold(),
        per_dim,
    })
}

/// Relative change `100 * (full - oned) / full`, both in percent. Positive
/// values are a drop in accuracy, negative values an improvement.
pub fn percent_change(full_accuracy: f64, oned_accuracy: f64) -> Result<f64, FitError> {
    if full_accuracy.is_nan() || full_accuracy <= 0.0 {
        return Err(FitError::NonPositiveFull(full_accuracy));
    }
    Ok(100.0 * (full_accuracy - oned_accuracy) / full_accuracy)
}

fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Formats a table cell such as `91.86/77.58 Δ15.55`; improvements carry an
/// explicit `+` (`91.41/93.75 Δ+2.56`). Inputs are percentages.
pub fn format_delta(full_accuracy: f64, oned_accuracy: f64) -> Result<String, FitError> {
    let delta = round2(percent_change(full_accuracy, oned_accuracy)?);
    let delta = if delta < 0.0 {
        format!("+{:.2}", -delta)
    } else {
        format!("{delta:.2}")
    };
    Ok(format!("{:.2}/{:.2} Δ{delta}", round2(full_accuracy), round2(oned_accuracy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embstore::{RunMetadata, Split, Stage};
    use approx::assert_abs_diff_eq;

    fn set(values: &[f32], labels: &[u8]) -> EmbeddingSet {
        let meta = RunMetadata::new("m", "t", 0, Split::Train, Stage::Finetuned);
        EmbeddingSet::new(meta, values.len(), 1, values.to_vec(), labels.to_vec()).unwrap()
    }

    /// Class 0 at {-1, -2, -1.5}, class 1 at {2, 3, 2.5}.
    fn separable() -> EmbeddingSet {
        set(&[-1.0, -2.0, -1.5, 2.0, 3.0, 2.5], &[0, 0, 0, 1, 1, 1])
    }

    /// Brute-force accuracy of one (threshold, direction) pair.
    fn brute_accuracy(values: &[f32], labels: &[u8], threshold: f64, flipped: bool) -> f64 {
        let correct = values
            .iter()
            .zip(labels)
            .filter(|(&v, &l)| {
                let pred = if flipped { f64::from(v) <= threshold } else { f64::from(v) > threshold };
                u8::from(pred) == l
            })
            .count();
        correct as f64 / values.len() as f64
    }

    #[test]
    fn default_grid_has_201_points() {
        let g = EpsilonGrid::default().values();
        assert_eq!(g.len(), 201);
        assert_eq!(g[0], -50.0);
        assert_eq!(g[100], 0.0);
        assert_eq!(g[200], 50.0);
        assert!(g.windows(2).all(|w| w[1] - w[0] == 0.5));
    }

    #[test]
    fn grid_validation() {
        assert!(EpsilonGrid::new(-1.0, 1.0, 0.0).is_err());
        assert!(EpsilonGrid::new(1.0, -1.0, 0.5).is_err());
        assert!(EpsilonGrid::new(f64::NAN, 1.0, 0.5).is_err());
        assert_eq!(EpsilonGrid::new(0.0, 0.0, 1.0).unwrap().values(), vec![0.0]);
        assert_eq!(EpsilonGrid::new(-1.0, 1.0, 0.3).unwrap().len(), 7);
    }

    #[test]
    fn separable_fit_matches_exhaustive_grid() {
        let train = separable();
        let rule = fit_rule(&train, 0, &FitOptions::default()).unwrap();
        assert_eq!(rule.mu, 0.5);

        // Oracle: evaluate every grid value directly and keep the first best.
        let (values, labels) = (train.data(), train.labels());
        let mut oracle: Option<(f64, f64, bool)> = None;
        for eps in EpsilonGrid::default().values() {
            let t = 0.5 + eps;
            let acc = brute_accuracy(values, labels, t, false);
            let (score, flip) = if 1.0 - acc > acc { (1.0 - acc, true) } else { (acc, false) };
            if oracle.is_none_or(|(best, _, _)| score > best) {
                oracle = Some((score, eps, flip));
            }
        }
        let (score, eps, flip) = oracle.unwrap();
        // Threshold -1.0 already separates: -1.0 <= -1.0 goes to class 0.
        assert_eq!((score, eps, flip), (1.0, -1.5, false));
        assert_eq!(rule.epsilon, eps);
        assert_eq!(rule.train_accuracy, 1.0);
        assert!(!rule.flipped);
    }

    #[test]
    fn swapped_labels_flip() {
        let train = set(&[-1.0, -2.0, -1.5, 2.0, 3.0, 2.5], &[1, 1, 1, 0, 0, 0]);
        let rule = fit_rule(&train, 0, &FitOptions::default()).unwrap();
        assert!(rule.flipped);
        assert_eq!(rule.train_accuracy, 1.0);
        assert_eq!(rule.epsilon, -1.5);
        assert_eq!(apply_rule(&rule, &train).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_unfittable() {
        let train = set(&[1.0, 2.0], &[0, 0]);
        assert_eq!(
            fit_rule(&train, 0, &FitOptions::default()),
            Err(FitError::SingleClass { present: 0 })
        );
    }

    #[test]
    fn dim_out_of_range() {
        assert_eq!(
            fit_rule(&separable(), 1, &FitOptions::default()),
            Err(FitError::DimOutOfRange { dim: 1, dims: 1 })
        );
    }

    #[test]
    fn validation_rows_by_hand() {
        let rule = fit_rule(&separable(), 0, &FitOptions::default()).unwrap();
        let val = set(&[-1.2, 2.8], &[0, 1]);
        // -1.2 <= -1.0 -> 0; 2.8 > -1.0 -> 1.
        assert_eq!(apply_rule(&rule, &val).unwrap(), 1.0);
    }

    #[test]
    fn equality_goes_to_label_zero() {
        let rule = ThresholdRule {
            dim: 0,
            mu: 0.25,
            epsilon: 0.5,
            flipped: false,
            train_accuracy: 1.0,
        };
        assert_eq!(rule.predict(0.75), 0);
        assert_eq!(rule.predict(0.7500001), 1);
        assert_eq!(apply_rule(&rule, &set(&[0.75], &[0])).unwrap(), 1.0);
    }

    #[test]
    fn flipped_labels_complement_accuracy() {
        let rule = fit_rule(&separable(), 0, &FitOptions::default()).unwrap();
        let val = set(&[-3.0, 0.0, 1.0, -1.0, 4.0], &[0, 1, 0, 1, 1]);
        let swapped = set(&[-3.0, 0.0, 1.0, -1.0, 4.0], &[1, 0, 1, 0, 0]);
        let a = apply_rule(&rule, &val).unwrap();
        assert_abs_diff_eq!(apply_rule(&rule, &swapped).unwrap(), 1.0 - a, epsilon = 1e-12);
    }

    #[test]
    fn apply_rejects_narrow_sets() {
        let rule = ThresholdRule {
            dim: 3,
            mu: 0.0,
            epsilon: 0.0,
            flipped: false,
            train_accuracy: 1.0,
        };
        assert_eq!(
            apply_rule(&rule, &separable()),
            Err(FitError::DimOutOfRange { dim: 3, dims: 1 })
        );
    }

    #[test]
    fn two_point_separability() {
        let train = set(&[-3.0, 3.0], &[0, 1]);
        assert_eq!(fit_rule(&train, 0, &FitOptions::default()).unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn majority_floor_on_overlapping_classes() {
        // 7 zeros and 3 ones all at the same value: no threshold separates them.
        let train = set(&[1.0; 10], &[0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
        let rule = fit_rule(&train, 0, &FitOptions::default()).unwrap();
        assert_eq!(rule.train_accuracy, 0.7);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let a = sample_rows(1000, 500, 7);
        assert_eq!(a, sample_rows(1000, 500, 7));
        assert_ne!(a, sample_rows(1000, 500, 8));
        assert_eq!(a.len(), 500);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_rows(3, 500, 7), vec![0, 1, 2]);
    }

    #[test]
    fn zero_sample_size() {
        let opts = FitOptions {
            sample_size: 0,
            ..FitOptions::default()
        };
        assert_eq!(fit_rule(&separable(), 0, &opts), Err(FitError::EmptySample));
    }

    #[test]
    fn percent_change_table_cells() {
        assert_abs_diff_eq!(percent_change(91.86, 77.58).unwrap(), 15.54, epsilon = 0.01);
        assert_eq!(percent_change(91.41, 91.41).unwrap(), 0.0);
        assert_abs_diff_eq!(percent_change(91.41, 93.75).unwrap(), -2.56, epsilon = 0.01);
        assert_eq!(percent_change(0.0, 50.0), Err(FitError::NonPositiveFull(0.0)));
    }

    #[test]
    fn delta_formatting() {
        // 100 * 14.28 / 91.86 = 15.5454..., rounded to two places.
        assert_eq!(format_delta(91.86, 77.58).unwrap(), "91.86/77.58 Δ15.55");
        assert_eq!(format_delta(91.41, 91.41).unwrap(), "91.41/91.41 Δ0.00");
        assert_eq!(format_delta(91.41, 93.75).unwrap(), "91.41/93.75 Δ+2.56");
        assert_eq!(format_delta(91.77, 91.69).unwrap(), "91.77/91.69 Δ0.09");
    }

    #[test]
    fn principal_dim_mismatch() {
        let meta = RunMetadata::new("m", "t", 0, Split::Validation, Stage::Finetuned);
        let wide = EmbeddingSet::new(meta, 1, 2, vec![0.0, 1.0], vec![0]).unwrap();
        assert_eq!(
            evaluate_principal(&separable(), &wide, &FitOptions::default()),
            Err(FitError::DimMismatch { train: 1, val: 2 })
        );
    }
}
