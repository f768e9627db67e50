use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use outlier_dims::embstore::{write_dump, RunMetadata, Split, Stage};
use outlier_dims::synthgen::{generate, SynthSpec};
use outlier_dims::EmbeddingSet;
use serde_json::Value;
use tempfile::TempDir;

fn odim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odim"))
        .args(args)
        .output()
        .expect("odim runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "odim failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted_pair(dir: &Path, prefix: &str, full: Option<f64>) -> (PathBuf, PathBuf) {
    let mut spec = SynthSpec::new(600, 32, 1.0, 0.5, 11).plant(5, -4.0, 4.0, 1.0);
    spec.full_model_accuracy = full;
    let (train, val) = generate(&spec).unwrap();
    let t = dir.join(format!("{prefix}.train.embd"));
    let v = dir.join(format!("{prefix}.val.embd"));
    write_dump(&train, &t).unwrap();
    write_dump(&val, &v).unwrap();
    (t, v)
}

#[test]
fn stats_reports_planted_outlier() {
    let dir = TempDir::new().unwrap();
    let (_, val) = planted_pair(dir.path(), "p", None);
    let json = ok_json(&odim(&["stats", s(&val)]));
    assert_eq!(json["outlier_dims"], serde_json::json!([5]));
    assert_eq!(json["principal"], 5);
    assert_eq!(json["variances"].as_array().unwrap().len(), 32);
}

#[test]
fn stats_on_constant_dump_is_empty() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("const.embd");
    let meta = RunMetadata::new("m", "t", 0, Split::Validation, Stage::Finetuned);
    let set = EmbeddingSet::from_rows(meta, &vec![vec![2.5f32, -1.0, 0.0]; 6], vec![0, 1, 0, 1, 0, 1]).unwrap();
    write_dump(&set, &path).unwrap();
    let json = ok_json(&odim(&["stats", s(&path)]));
    assert_eq!(json["outlier_dims"], serde_json::json!([]));
}

#[test]
fn stats_writes_csv_and_svg() {
    let dir = TempDir::new().unwrap();
    let (_, val) = planted_pair(dir.path(), "p", None);
    let csv = dir.path().join("stats.csv");
    let svg = dir.path().join("act.svg");
    ok_json(&odim(&["stats", s(&val), "--csv", s(&csv), "--diagram", s(&svg)]));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("dim,mean,variance\n"));
    assert_eq!(text.lines().count(), 33);
    roxmltree::Document::parse(&fs::read_to_string(&svg).unwrap()).expect("valid SVG");
}

#[test]
fn stats_average_over_seeds() {
    let dir = TempDir::new().unwrap();
    let (a, b) = planted_pair(dir.path(), "p", None);
    let json = ok_json(&odim(&["stats", "--average", s(&a), s(&b)]));
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert_eq!(json["average_means"].as_array().unwrap().len(), 32);

    let out = odim(&["stats", s(&a), s(&b)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_names_the_path() {
    let out = odim(&["stats", "/nonexistent/run.embd"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/run.embd"), "{}", stderr(&out));
}

#[test]
fn oned_recovers_planted_dim() {
    let dir = TempDir::new().unwrap();
    let (t, v) = planted_pair(dir.path(), "p", None);
    let json = ok_json(&odim(&["oned", s(&t), s(&v)]));
    assert_eq!(json["rho"], 5);
    assert_eq!(json["rho_is_outlier"], true);
    assert!(json["val_accuracy"].as_f64().unwrap() >= 0.95);
    assert!(json["table_cell"].is_null());
    assert!(json["sweep"].is_null());
}

#[test]
fn oned_formats_table_cell() {
    let dir = TempDir::new().unwrap();
    let (t, v) = planted_pair(dir.path(), "p", Some(0.99));
    let json = ok_json(&odim(&["oned", s(&t), s(&v)]));
    let cell = json["table_cell"].as_str().unwrap();
    assert!(cell.starts_with("99.00/"), "{cell}");
    assert!(cell.contains('Δ'), "{cell}");
    assert!(json["percent_change"].is_number());
}

#[test]
fn oned_sweep_csv_has_one_row_per_dim() {
    let dir = TempDir::new().unwrap();
    let spec = SynthSpec::new(200, 2, 1.0, 0.5, 3).plant(1, -3.0, 3.0, 1.0);
    let (train, val) = generate(&spec).unwrap();
    let t = dir.path().join("t.embd");
    let v = dir.path().join("v.embd");
    write_dump(&train, &t).unwrap();
    write_dump(&val, &v).unwrap();
    let csv = dir.path().join("sweep.csv");
    let svg = dir.path().join("sweep.svg");
    let json = ok_json(&odim(&["oned", "--sweep", s(&t), s(&v), "--csv", s(&csv), "--plot", s(&svg)]));
    assert_eq!(json["sweep"]["best_dim"], 1);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dim,variance,variance_percentile,val_accuracy"));
    assert_eq!(lines.count(), 2);
    roxmltree::Document::parse(&fs::read_to_string(&svg).unwrap()).expect("valid SVG");
}

#[test]
fn oned_csv_without_sweep_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (t, v) = planted_pair(dir.path(), "p", None);
    let out = odim(&["oned", s(&t), s(&v), "--csv", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oned_single_class_train_is_analysis_error() {
    let dir = TempDir::new().unwrap();
    let meta = RunMetadata::new("m", "t", 0, Split::Train, Stage::Finetuned);
    let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 0.5]).collect();
    let train = EmbeddingSet::from_rows(meta.clone(), &rows, vec![1; 10]).unwrap();
    let val = EmbeddingSet::from_rows(meta, &rows, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
    let t = dir.path().join("t.embd");
    let v = dir.path().join("v.embd");
    write_dump(&train, &t).unwrap();
    write_dump(&val, &v).unwrap();
    let out = odim(&["oned", s(&t), s(&v)]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn oned_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let (t, _) = planted_pair(dir.path(), "a", None);
    let spec = SynthSpec::new(100, 16, 1.0, 0.5, 1);
    let (_, other) = generate(&spec).unwrap();
    let v = dir.path().join("other.embd");
    write_dump(&other, &v).unwrap();
    let out = odim(&["oned", s(&t), s(&v)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("32") && stderr(&out).contains("16"), "{}", stderr(&out));
}

fn corpus_run(root: &Path, task: &str, seed: u64, d: usize, planted: &[usize]) {
    let mut spec = SynthSpec::new(300, d, 1.0, 0.5, seed);
    spec.model_name = "bert".into();
    spec.task_name = task.into();
    for &dim in planted {
        spec = spec.plant(dim, -5.0, 5.0, 1.0);
    }
    let (_, val) = generate(&spec).unwrap();
    let dir = root.join(task);
    fs::create_dir_all(&dir).unwrap();
    write_dump(&val, dir.join(format!("seed{seed}.embd"))).unwrap();
}

#[test]
fn persist_counts_every_run() {
    let dir = TempDir::new().unwrap();
    for seed in 0..3 {
        corpus_run(dir.path(), "sst2", seed, 40, &[7]);
    }
    let csv = dir.path().join("freq.csv");
    let svg = dir.path().join("freq.svg");
    let json = ok_json(&odim(&["persist", s(dir.path()), "--csv", s(&csv), "--plot", s(&svg)]));
    let model = &json["models"][0];
    assert_eq!(model["model_name"], "bert");
    assert_eq!(model["runs_total"], 3);
    assert_eq!(model["per_dim_frequency"]["7"], 1.0);
    assert_eq!(model["top_k"][0]["dim"], 7);
    assert!(fs::read_to_string(&csv).unwrap().contains("7,3,1"));
    roxmltree::Document::parse(&fs::read_to_string(&svg).unwrap()).expect("valid SVG");
}

#[test]
fn persist_single_run() {
    let dir = TempDir::new().unwrap();
    corpus_run(dir.path(), "mrpc", 0, 40, &[3, 11]);
    let json = ok_json(&odim(&["persist", s(dir.path())]));
    let model = &json["models"][0];
    assert_eq!(model["runs_total"], 1);
    assert_eq!(model["unique_outliers"], 2);
    assert_eq!(model["per_dim_frequency"]["3"], 1.0);
    assert_eq!(model["per_dim_frequency"]["11"], 1.0);
}

#[test]
fn persist_empty_corpus_is_input_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("notes.txt"), "not a dump").unwrap();
    let out = odim(&["persist", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no EMBD dumps"), "{}", stderr(&out));
}

#[test]
fn persist_mixed_dims_is_rejected() {
    let dir = TempDir::new().unwrap();
    corpus_run(dir.path(), "sst2", 0, 40, &[7]);
    corpus_run(dir.path(), "qnli", 0, 48, &[7]);
    let out = odim(&["persist", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("d=40") && stderr(&out).contains("d=48"), "{}", stderr(&out));
}

#[test]
fn persist_unknown_model() {
    let dir = TempDir::new().unwrap();
    corpus_run(dir.path(), "sst2", 0, 40, &[7]);
    let out = odim(&["persist", s(dir.path()), "--model", "roberta"]);
    assert_eq!(out.status.code(), Some(2));
}

fn spec_file(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(
        dir.path(),
        r#"{"n": 120, "d": 16, "background_std": 1.0, "class_balance": 0.3, "seed": 9,
            "planted": [{"dim": 4, "class0_mean": -2.0, "class1_mean": 2.0, "noise_std": 0.5}]}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let json = ok_json(&odim(&["synth", s(&spec), s(&a)]));
    assert_eq!(json["planted_dims"], serde_json::json!([4]));
    ok_json(&odim(&["synth", s(&spec), s(&b)]));
    for suffix in [".train.embd", ".val.embd"] {
        let x = fs::read(dir.path().join(format!("a{suffix}"))).unwrap();
        let y = fs::read(dir.path().join(format!("b{suffix}"))).unwrap();
        assert_eq!(x, y, "{suffix} differs");
    }
}

#[test]
fn synth_rejects_zero_noise() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(
        dir.path(),
        r#"{"n": 50, "d": 8, "background_std": 1.0, "class_balance": 0.5, "seed": 1,
            "planted": [{"dim": 2, "class0_mean": 0.0, "class1_mean": 1.0, "noise_std": 0.0}]}"#,
    );
    let out = odim(&["synth", s(&spec), s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("noise_std"), "{}", stderr(&out));
}

#[test]
fn json_flag_writes_report_file() {
    let dir = TempDir::new().unwrap();
    let (_, val) = planted_pair(dir.path(), "p", None);
    let report = dir.path().join("report.json");
    let printed = ok_json(&odim(&["stats", s(&val), "--json", s(&report)]));
    let saved: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(printed, saved);
}
