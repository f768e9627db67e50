//! Outlier persistence across runs: how often each dimension is an outlier
//! over a collection of dumps from one model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimstats::{compute_stats, DimStats};
use crate::embstore::EmbeddingSet;
use crate::par;

/// Default number of dimensions in a frequency report.
pub const DEFAULT_TOP_K: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum PersistError {
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("runs mix models {first:?} and {other:?}")]
    MixedModels { first: String, other: String },
    #[error("model {model:?}: runs have d={first} and d={other}")]
    DimMismatch { model: String, first: usize, other: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceTable {
    pub model_name: String,
    pub runs_total: usize,
    pub per_dim_counts: BTreeMap<usize, usize>,
    pub per_dim_frequency: BTreeMap<usize, f64>,
    pub unique_outliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimFrequency {
    pub dim: usize,
    pub count: usize,
    pub frequency: f64,
}

impl PersistenceTable {
    /// Builds a table from already computed per-run statistics.
    pub fn from_stats(model_name: impl Into<String>, stats: &[DimStats]) -> Result<Self, PersistError> {
        if stats.is_empty() {
            return Err(PersistError::NoRuns);
        }
        let mut per_dim_counts = BTreeMap::new();
        for s in stats {
            for dim in s.outlier_dims() {
                *per_dim_counts.entry(dim).or_insert(0) += 1;
            }
        }
        Ok(Self::from_counts(model_name.into(), stats.len(), per_dim_counts))
    }

    fn from_counts(model_name: String, runs_total: usize, per_dim_counts: BTreeMap<usize, usize>) -> Self {
        let per_dim_frequency = per_dim_counts
            .iter()
            .map(|(&d, &c)| (d, c as f64 / runs_total as f64))
            .collect();
        Self {
            model_name,
            runs_total,
            unique_outliers: per_dim_counts.len(),
            per_dim_counts,
            per_dim_frequency,
        }
    }

    /// Merges two tables for the same model. Count addition is associative
    /// and commutative, so runs can be aggregated in any grouping.
    pub fn merge(&self, other: &Self) -> Self {
        let mut counts = self.per_dim_counts.clone();
        for (&d, &c) in &other.per_dim_counts {
            *counts.entry(d).or_insert(0) += c;
        }
        Self::from_counts(self.model_name.clone(), self.runs_total + other.runs_total, counts)
    }

    pub fn outlier_set(&self) -> BTreeSet<usize> {
        self.per_dim_counts.keys().copied().collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<DimFrequency> {
        let mut entries: Vec<DimFrequency> = self
            .per_dim_counts
            .iter()
            .map(|(&dim, &count)| DimFrequency {
                dim,
                count,
                frequency: self.per_dim_frequency[&dim],
            })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then(a.dim.cmp(&b.dim)));
        entries.truncate(k);
        entries
    }

    /// `dim,count,frequency` rows with a header, ascending by dimension.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,count,frequency\n");
        for (d, c) in &self.per_dim_counts {
            out.push_str(&format!("{d},{c},{:?}\n", self.per_dim_frequency[d]));
        }
        out
    }
}

fn check_runs(runs: &[&EmbeddingSet]) -> Result<(), PersistError> {
    let first = runs.first().ok_or(PersistError::NoRuns)?;
    for r in runs {
        if r.meta().model_name != first.meta().model_name {
            return Err(PersistError::MixedModels {
                first: first.meta().model_name.clone(),
                other: r.meta().model_name.clone(),
            });
        }
        if r.dims() != first.dims() {
            return Err(PersistError::DimMismatch {
                model: first.meta().model_name.clone(),
                first: first.dims(),
                other: r.dims(),
            });
        }
    }
    Ok(())
}

/// Counts outlier occurrences per dimension over `runs`.
pub fn aggregate(runs: &[EmbeddingSet]) -> Result<PersistenceTable, PersistError> {
    let refs: Vec<&EmbeddingSet> = runs.iter().collect();
    check_runs(&refs)?;
    let stats = par::map_slice(runs, compute_stats);
    PersistenceTable::from_stats(runs[0].meta().model_name.clone(), &stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub runs: usize,
    pub unique_outliers: usize,
    /// Mean over runs of the principal dimension's variance.
    pub avg_var_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub pre: StageSummary,
    pub fine: StageSummary,
    pub persisted_dims: BTreeSet<usize>,
}

fn summarize(model: &str, stats: &[DimStats]) -> Result<(StageSummary, BTreeSet<usize>), PersistError> {
    let table = PersistenceTable::from_stats(model, stats)?;
    let avg_var_rho = stats.iter().map(DimStats::principal_variance).sum::<f64>() / stats.len() as f64;
    Ok((
        StageSummary {
            runs: stats.len(),
            unique_outliers: table.unique_outliers,
            avg_var_rho,
        },
        table.outlier_set(),
    ))
}

/// Outlier counts and principal variance before and after fine-tuning, and
/// the dimensions that are outliers in both stages.
pub fn compare_stages(pretrained: &[EmbeddingSet], finetuned: &[EmbeddingSet]) -> Result<StageComparison, PersistError> {
    if pretrained.is_empty() || finetuned.is_empty() {
        return Err(PersistError::NoRuns);
    }
    let all: Vec<&EmbeddingSet> = pretrained.iter().chain(finetuned).collect();
    check_runs(&all)?;
    let model = pretrained[0].meta().model_name.clone();
    let pre_stats = par::map_slice(pretrained, compute_stats);
    let fine_stats = par::map_slice(finetuned, compute_stats);
    compare_stage_stats(&model, &pre_stats, &fine_stats)
}

pub fn compare_stage_stats(model: &str, pre: &[DimStats], fine: &[DimStats]) -> Result<StageComparison, PersistError> {
    let (pre, pre_set) = summarize(model, pre)?;
    let (fine, fine_set) = summarize(model, fine)?;
    Ok(StageComparison {
        pre,
        fine,
        persisted_dims: pre_set.intersection(&fine_set).copied().collect(),
    })
}

/// Dimensions by descending count, ties by ascending index, at most `k`.
pub fn top_k_report(table: &PersistenceTable, k: usize) -> Vec<DimFrequency> {
    table.top_k(k)
}
