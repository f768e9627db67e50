//! Outlier-dimension analysis for dumps of sentence-embedding matrices.
//!
//! The pipeline is split the same way the command-line tool is:
//!
//! * [`embstore`] reads and writes the `EMBD` dump format (and CSV fixtures).
//! * [`dimstats`] computes per-dimension moments and flags outlier dimensions,
//!   i.e. dimensions whose variance is at least five times the average.
//! * [`onedim`] fits and evaluates the single-dimension threshold classifier
//!   and sweeps it over every dimension.
//! * [`persistence`] counts how often each dimension is an outlier across runs.
//! * [`synthgen`] plants outlier dimensions in Gaussian data for end-to-end tests.
//! * [`report`] renders SVG figures and CSV tables; [`cli`] drives it all.
//!
//! Per-dimension and per-run work runs on rayon when the `parallel` feature is
//! enabled (the default) and sequentially otherwise. Results are identical in
//! both modes.

pub mod cli;
pub mod corr;
pub mod dimstats;
pub mod embstore;
pub mod onedim;
pub mod par;
pub mod persistence;
pub mod report;
pub mod synthgen;

pub use dimstats::{compute_stats, DimStats};
pub use embstore::{read_csv, read_dump, write_dump, EmbeddingSet, RunMetadata, Split, Stage};
pub use onedim::{
    apply_rule, evaluate_principal, fit_rule, percent_change, sweep_all_dims, EpsilonGrid,
    SweepResult, ThresholdRule,
};
pub use persistence::{aggregate, compare_stages, top_k_report, PersistenceTable};
pub use synthgen::{generate, SynthSpec};
