//! The `odim` command-line front end.
//!
//! Exit codes: 0 on success, 1 for analysis errors (e.g. single-class
//! training data), 2 for I/O, format and usage errors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use walkdir::WalkDir;

use crate::dimstats::{self, compute_stats, DimStats};
use crate::embstore::{self, EmbdError, EmbeddingSet, RunKey, RunMetadata, Split, Stage};
use crate::onedim::{self, EpsilonGrid, FitError, FitOptions};
use crate::par;
use crate::persistence::{self, PersistError, PersistenceTable, StageComparison};
use crate::report;
use crate::synthgen::{self, SynthError, SynthSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: EmbdError,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fit(_) | CliError::Persist(_) => 1,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Input(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "odim", version, about = "Outlier-dimension analysis for sentence-embedding dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalOpts,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Also write the JSON report to this file.
    #[arg(long, global = true, value_name = "FILE")]
    pub json: Option<PathBuf>,
    /// Write the command's CSV table to this file.
    #[arg(long, global = true, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Write the command's SVG figure to this file.
    #[arg(long, global = true, value_name = "FILE", visible_alias = "diagram")]
    pub plot: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = -50.0, allow_hyphen_values = true)]
    pub grid_min: f64,
    #[arg(long, global = true, default_value_t = 50.0, allow_hyphen_values = true)]
    pub grid_max: f64,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub grid_step: f64,
    /// Training rows sampled to pick the principal dimension and its mean.
    #[arg(long, global = true, default_value_t = onedim::DEFAULT_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub sample_seed: u64,
}

impl GlobalOpts {
    fn fit_options(&self) -> Result<FitOptions> {
        Ok(FitOptions {
            sample_size: self.sample_size,
            sample_seed: self.sample_seed,
            grid: EpsilonGrid::new(self.grid_min, self.grid_max, self.grid_step)?,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-dimension statistics and outlier dimensions of a dump.
    Stats {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        /// Average per-dimension means over several dumps (e.g. seeds).
        #[arg(long)]
        average: bool,
    },
    /// Single-dimension threshold classifier on the principal dimension.
    Oned {
        train: PathBuf,
        val: PathBuf,
        /// Fit and score every dimension, not just the principal one.
        #[arg(long)]
        sweep: bool,
    },
    /// Outlier persistence over a directory of dumps.
    Persist {
        corpus_root: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = persistence::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Generate a synthetic train/validation pair from a JSON spec.
    Synth { spec: PathBuf, out_prefix: PathBuf },
}

/// Runs a parsed command. The JSON report goes to `out`, warnings to `err`.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    let report = match &cli.command {
        Command::Stats { dumps, average } => cmd_stats(dumps, *average, g)?,
        Command::Oned { train, val, sweep } => cmd_oned(train, val, *sweep, g)?,
        Command::Persist {
            corpus_root,
            model,
            top_k,
        } => cmd_persist(corpus_root, model.as_deref(), *top_k, g, err)?,
        Command::Synth { spec, out_prefix } => cmd_synth(spec, out_prefix)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &g.json {
        write_file(path, format!("{text}\n"))?;
    }
    writeln!(out, "{text}").map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(path: &Path) -> Result<EmbeddingSet> {
    embstore::read_dump(path).map_err(|source| format_error(path, source))
}

fn format_error(path: &Path, source: EmbdError) -> CliError {
    match source {
        EmbdError::Io { path, source } => CliError::Io { path, source },
        source => CliError::Format {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn run_label(meta: &RunMetadata) -> String {
    format!("{} / {} ({}, {})", meta.model_name, meta.task_name, meta.stage, meta.split)
}

pub fn cmd_stats(dumps: &[PathBuf], average: bool, g: &GlobalOpts) -> Result<serde_json::Value> {
    if dumps.len() > 1 && !average {
        return Err(CliError::Input("several dumps given; pass --average to combine them".into()));
    }
    let sets = dumps.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    if let Some(other) = sets.iter().find(|s| s.dims() != sets[0].dims()) {
        return Err(CliError::Input(format!(
            "cannot average dumps with d={} and d={}",
            sets[0].dims(),
            other.dims()
        )));
    }
    let stats: Vec<DimStats> = par::map_slice(&sets, compute_stats);

    let means = dimstats::average_means(&stats);
    let variances: Vec<f64> = (0..stats[0].dims)
        .map(|d| stats.iter().map(|s| s.variances[d]).sum::<f64>() / stats.len() as f64)
        .collect();
    if let Some(path) = &g.csv {
        let mut csv = String::from("dim,mean,variance\n");
        for (d, (m, v)) in means.iter().zip(&variances).enumerate() {
            csv.push_str(&format!("{d},{m:?},{v:?}\n"));
        }
        write_file(path, csv)?;
    }
    if let Some(path) = &g.plot {
        let mut title = run_label(sets[0].meta());
        if sets.len() > 1 {
            title.push_str(&format!(", mean of {} runs", sets.len()));
        }
        write_file(path, report::activation_diagram(&means, &title))?;
    }

    if stats.len() == 1 {
        return Ok(serde_json::to_value(stats[0].report()).expect("report serializes"));
    }
    let runs: Vec<_> = dumps
        .iter()
        .zip(&stats)
        .map(|(p, s)| json!({ "path": p, "report": s.report() }))
        .collect();
    Ok(json!({ "runs": runs, "average_means": means }))
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    best_dim: usize,
    best_val_accuracy: f64,
    best_variance_percentile: u32,
    correlation_pearson: Option<f64>,
    correlation_spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_percent_change: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_table_cell: Option<String>,
}

#[derive(Debug, Serialize)]
struct OnedSummary {
    rho: usize,
    rho_is_outlier: bool,
    mu: f64,
    epsilon: f64,
    threshold: f64,
    flipped: bool,
    train_accuracy: f64,
    val_accuracy: f64,
    full_model_accuracy: Option<f64>,
    percent_change: Option<f64>,
    table_cell: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepSummary>,
}

pub fn cmd_oned(train: &Path, val: &Path, sweep: bool, g: &GlobalOpts) -> Result<serde_json::Value> {
    if !sweep && (g.csv.is_some() || g.plot.is_some()) {
        return Err(CliError::Input("--csv and --plot for oned need --sweep".into()));
    }
    let opts = g.fit_options()?;
    let train = load(train)?;
    let val = load(val)?;
    let eval = onedim::evaluate_principal(&train, &val, &opts)?;

    let full = val.meta().full_model_accuracy.or(train.meta().full_model_accuracy);
    let delta = |acc: f64| -> Result<Option<(f64, String)>> {
        full.map(|f| {
            Ok((
                onedim::percent_change(100.0 * f, 100.0 * acc)?,
                onedim::format_delta(100.0 * f, 100.0 * acc)?,
            ))
        })
        .transpose()
    };
    let principal_delta = delta(eval.val_accuracy)?;

    let sweep_summary = if sweep {
        let result = onedim::sweep_all_dims(&train, &val, &opts)?;
        if let Some(path) = &g.csv {
            write_file(path, result.to_csv())?;
        }
        if let Some(path) = &g.plot {
            write_file(path, report::variance_accuracy_scatter(&result, &run_label(val.meta())))?;
        }
        let best = result.best();
        let best_delta = delta(best.val_accuracy)?;
        Some(SweepSummary {
            best_dim: result.best_dim,
            best_val_accuracy: best.val_accuracy,
            best_variance_percentile: best.variance_percentile,
            correlation_pearson: result.correlation_pearson,
            correlation_spearman: result.correlation_spearman,
            best_percent_change: best_delta.as_ref().map(|d| d.0),
            best_table_cell: best_delta.map(|d| d.1),
        })
    } else {
        None
    };

    let summary = OnedSummary {
        rho: eval.rho,
        rho_is_outlier: eval.rho_is_outlier,
        mu: eval.rule.mu,
        epsilon: eval.rule.epsilon,
        threshold: eval.rule.threshold(),
        flipped: eval.rule.flipped,
        train_accuracy: eval.rule.train_accuracy,
        val_accuracy: eval.val_accuracy,
        full_model_accuracy: full,
        percent_change: principal_delta.as_ref().map(|d| d.0),
        table_cell: principal_delta.map(|d| d.1),
        sweep: sweep_summary,
    };
    Ok(serde_json::to_value(summary).expect("summary serializes"))
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub meta: RunMetadata,
    pub rows: usize,
    pub dims: usize,
}

/// Dumps found under a directory, identified by their `EMBD` magic.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusIndex {
    pub fn scan(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(CliError::Io {
                path: root.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
            });
        }
        let mut entries = Vec::new();
        let mut seen: HashMap<RunKey, PathBuf> = HashMap::new();
        for item in WalkDir::new(root).sort_by_file_name() {
            let item = item.map_err(|e| CliError::Io {
                path: e.path().unwrap_or(root).to_path_buf(),
                source: e.into(),
            })?;
            if !item.file_type().is_file() || !embstore::has_magic(item.path()) {
                continue;
            }
            let path = item.path().to_path_buf();
            let info = embstore::read_info(&path).map_err(|e| format_error(&path, e))?;
            if let Some(prev) = seen.insert(info.meta.key(), path.clone()) {
                return Err(CliError::Input(format!(
                    "{} and {} both hold run {}",
                    prev.display(),
                    path.display(),
                    info.meta.key()
                )));
            }
            entries.push(CorpusEntry {
                path,
                meta: info.meta,
                rows: info.rows,
                dims: info.dims,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn models(&self) -> BTreeMap<&str, Vec<&CorpusEntry>> {
        let mut by_model: BTreeMap<&str, Vec<&CorpusEntry>> = BTreeMap::new();
        for e in &self.entries {
            by_model.entry(e.meta.model_name.as_str()).or_default().push(e);
        }
        by_model
    }
}

/// Runs of one stage, preferring validation dumps.
fn stage_runs<'a>(entries: &[&'a CorpusEntry], stage: Stage) -> (Vec<&'a CorpusEntry>, Split) {
    let pick = |split| -> Vec<&CorpusEntry> {
        entries
            .iter()
            .copied()
            .filter(|e| e.meta.stage == stage && e.meta.split == split)
            .collect()
    };
    let val = pick(Split::Validation);
    if val.is_empty() {
        (pick(Split::Train), Split::Train)
    } else {
        (val, Split::Validation)
    }
}

fn check_dims(model: &str, entries: &[&CorpusEntry]) -> Result<()> {
    if let Some(e) = entries.iter().find(|e| e.dims != entries[0].dims) {
        return Err(PersistError::DimMismatch {
            model: model.to_string(),
            first: entries[0].dims,
            other: e.dims,
        }
        .into());
    }
    Ok(())
}

fn stats_for(model: &str, entries: &[&CorpusEntry]) -> Result<Vec<DimStats>> {
    check_dims(model, entries)?;
    par::map_slice(entries, |e| load(&e.path).map(|s| compute_stats(&s)))
        .into_iter()
        .collect()
}

#[derive(Debug, Serialize)]
struct ModelPersistence {
    #[serde(flatten)]
    table: PersistenceTable,
    stage: Stage,
    split: Split,
    top_k: Vec<persistence::DimFrequency>,
    stage_comparison: Option<StageComparison>,
}

fn per_model_path(path: &Path, model: &str, multiple: bool) -> PathBuf {
    if !multiple {
        return path.to_path_buf();
    }
    let safe: String = model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{safe}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{safe}"),
    };
    path.with_file_name(name)
}

pub fn cmd_persist(
    root: &Path,
    model: Option<&str>,
    top_k: usize,
    g: &GlobalOpts,
    err: &mut dyn Write,
) -> Result<serde_json::Value> {
    let index = CorpusIndex::scan(root)?;
    if index.entries.is_empty() {
        return Err(CliError::Input(format!("{}: no EMBD dumps found", root.display())));
    }
    let mut models = index.models();
    if let Some(name) = model {
        models.retain(|m, _| *m == name);
        if models.is_empty() {
            return Err(CliError::Input(format!("{}: no dumps for model {name:?}", root.display())));
        }
    }

    let multiple = models.len() > 1;
    let mut reports = Vec::new();
    for (name, entries) in &models {
        let (fine, fine_split) = stage_runs(entries, Stage::Finetuned);
        let (pre, pre_split) = stage_runs(entries, Stage::Pretrained);
        let (primary, stage, split) = if fine.is_empty() {
            let _ = writeln!(err, "warning: {name}: no fine-tuned dumps; counting pretrained runs");
            (&pre, Stage::Pretrained, pre_split)
        } else {
            (&fine, Stage::Finetuned, fine_split)
        };
        if split == Split::Train {
            let _ = writeln!(err, "warning: {name}: no validation dumps for {stage}; aggregating train dumps");
        }

        let primary_stats = stats_for(name, primary)?;
        let table = PersistenceTable::from_stats(*name, &primary_stats)?;
        let stage_comparison = if stage == Stage::Finetuned && !pre.is_empty() {
            let all: Vec<&CorpusEntry> = pre.iter().chain(primary.iter()).copied().collect();
            check_dims(name, &all)?;
            let pre_stats = stats_for(name, &pre)?;
            Some(persistence::compare_stage_stats(name, &pre_stats, &primary_stats)?)
        } else {
            None
        };

        let top = table.top_k(top_k);
        if let Some(path) = &g.csv {
            write_file(&per_model_path(path, name, multiple), table.to_csv())?;
        }
        if let Some(path) = &g.plot {
            let title = format!("{name}: outlier frequency over {} runs", table.runs_total);
            write_file(&per_model_path(path, name, multiple), report::frequency_bars(&top, &title))?;
        }
        reports.push(ModelPersistence {
            table,
            stage,
            split,
            top_k: top,
            stage_comparison,
        });
    }
    Ok(json!({ "models": reports }))
}

pub fn synth_paths(out_prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = out_prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".train.embd"), with(".val.embd"))
}

pub fn cmd_synth(spec_path: &Path, out_prefix: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(spec_path).map_err(|source| CliError::Io {
        path: spec_path.to_path_buf(),
        source,
    })?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let (train, val) = synthgen::generate(&spec).map_err(|e| match e {
        SynthError::Invalid { .. } => CliError::Input(format!("{}: {e}", spec_path.display())),
        SynthError::Set(source) => format_error(spec_path, source),
    })?;
    let (train_path, val_path) = synth_paths(out_prefix);
    embstore::write_dump(&train, &train_path).map_err(|e| format_error(&train_path, e))?;
    embstore::write_dump(&val, &val_path).map_err(|e| format_error(&val_path, e))?;
    Ok(json!({
        "train": train_path,
        "val": val_path,
        "n": spec.n,
        "d": spec.d,
        "planted_dims": spec.planted.iter().map(|p| p.dim).collect::<Vec<_>>(),
    }))
}
