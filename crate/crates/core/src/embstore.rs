//! The `EMBD` dump format and the validated in-memory [`EmbeddingSet`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMBD" | u32 version = 1 | u32 header_len | header_len bytes of UTF-8 JSON
//!        | n*d f32 values, row-major | n label bytes
//! ```
//!
//! The JSON header carries the run metadata together with `n` and `d`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EMBD";
pub const VERSION: u32 = 1;

/// Bytes before the JSON header: magic, version, header length.
const PREAMBLE_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum EmbdError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("magic: expected \"EMBD\", found {}", show_magic(found))]
    BadMagic { found: Vec<u8> },
    #[error("version: expected {VERSION}, found {found}")]
    UnsupportedVersion { found: u32 },
    #[error("{field}: file truncated")]
    Truncated { field: &'static str },
    #[error("header: {0}")]
    Header(#[source] serde_json::Error),
    #[error("{field}: must be at least 1")]
    EmptyShape { field: &'static str },
    #[error("data: header declares {rows}x{dims} values ({expected} bytes) but payload holds {actual} bytes")]
    PayloadLength {
        rows: usize,
        dims: usize,
        expected: u64,
        actual: u64,
    },
    #[error("labels: expected {expected} label bytes, found {actual}")]
    LabelLength { expected: usize, actual: usize },
    #[error("data: expected {expected} values for the declared shape, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("data: non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f32 },
    #[error("labels: row {row} has label {value}, expected 0 or 1")]
    LabelDomain { row: usize, value: String },
    #[error("full_model_accuracy: {value} is outside [0, 1]")]
    Accuracy { value: f64 },
    #[error("csv row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("csv row {row}, column {col}: cannot parse {cell:?} as a number")]
    NonNumeric { row: usize, col: usize, cell: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn show_magic(bytes: &[u8]) -> String {
    if bytes.iter().all(|b| b.is_ascii_graphic()) {
        format!("{:?}", String::from_utf8_lossy(bytes))
    } else {
        format!("{bytes:02x?}")
    }
}

pub type Result<T> = std::result::Result<T, EmbdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        })
    }
}

/// Provenance of a dump. `(model_name, task_name, seed, split, stage)` identifies
/// a dump within a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_name: String,
    pub task_name: String,
    pub seed: u64,
    pub split: Split,
    pub stage: Stage,
    /// Accuracy of the full model with its classification head, as a fraction.
    #[serde(default)]
    pub full_model_accuracy: Option<f64>,
}

/// Identity of a dump within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub model_name: String,
    pub task_name: String,
    pub seed: u64,
    pub split: Split,
    pub stage: Stage,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/seed{}/{}/{}",
            self.model_name, self.task_name, self.seed, self.split, self.stage
        )
    }
}

impl RunMetadata {
    pub fn new(model_name: impl Into<String>, task_name: impl Into<String>, seed: u64, split: Split, stage: Stage) -> Self {
        Self {
            model_name: model_name.into(),
            task_name: task_name.into(),
            seed,
            split,
            stage,
            full_model_accuracy: None,
        }
    }

    pub fn with_full_accuracy(mut self, accuracy: f64) -> Self {
        self.full_model_accuracy = Some(accuracy);
        self
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            model_name: self.model_name.clone(),
            task_name: self.task_name.clone(),
            seed: self.seed,
            split: self.split,
            stage: self.stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.full_model_accuracy {
            Some(value) if !(0.0..=1.0).contains(&value) => Err(EmbdError::Accuracy { value }),
            _ => Ok(()),
        }
    }
}

/// An `n x d` matrix of sentence embeddings with one binary label per row.
///
/// Construction validates every invariant, so any `EmbeddingSet` in hand is
/// non-empty, finite and carries labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    meta: RunMetadata,
    rows: usize,
    dims: usize,
    data: Vec<f32>,
    labels: Vec<u8>,
}

impl EmbeddingSet {
    pub fn new(meta: RunMetadata, rows: usize, dims: usize, data: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        meta.validate()?;
        if rows == 0 {
            return Err(EmbdError::EmptyShape { field: "n" });
        }
        if dims == 0 {
            return Err(EmbdError::EmptyShape { field: "d" });
        }
        let expected = rows.checked_mul(dims).ok_or(EmbdError::DataLength {
            expected: usize::MAX,
            actual: data.len(),
        })?;
        if data.len() != expected {
            return Err(EmbdError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if labels.len() != rows {
            return Err(EmbdError::LabelLength {
                expected: rows,
                actual: labels.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbdError::NonFinite {
                row: i / dims,
                col: i % dims,
                value: data[i],
            });
        }
        if let Some(row) = labels.iter().position(|&l| l > 1) {
            return Err(EmbdError::LabelDomain {
                row,
                value: labels[row].to_string(),
            });
        }
        Ok(Self {
            meta,
            rows,
            dims,
            data,
            labels,
        })
    }

    /// Builds a set from row vectors; every row must have the same width.
    pub fn from_rows(meta: RunMetadata, rows: &[Vec<f32>], labels: Vec<u8>) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dims) {
            return Err(EmbdError::RaggedRow {
                row,
                expected: dims,
                found: r.len(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(meta, rows.len(), dims, data, labels)
    }

    pub fn meta(&self) -> &RunMetadata {
        &self.meta
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Row-major values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dims..(r + 1) * self.dims]
    }

    pub fn value(&self, row: usize, dim: usize) -> f32 {
        self.data[row * self.dims + dim]
    }

    /// Values of one dimension, in row order.
    pub fn column(&self, dim: usize) -> impl ExactSizeIterator<Item = f32> + Clone + '_ {
        assert!(dim < self.dims, "dimension {dim} out of range for d={}", self.dims);
        self.data.iter().skip(dim).step_by(self.dims).copied()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.rows - ones, ones]
    }

    pub fn has_both_classes(&self) -> bool {
        let [zeros, ones] = self.class_counts();
        zeros > 0 && ones > 0
    }

    pub fn with_meta(mut self, meta: RunMetadata) -> Result<Self> {
        meta.validate()?;
        self.meta = meta;
        Ok(self)
    }

    pub fn into_parts(self) -> (RunMetadata, usize, usize, Vec<f32>, Vec<u8>) {
        (self.meta, self.rows, self.dims, self.data, self.labels)
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    model_name: String,
    task_name: String,
    seed: u64,
    split: Split,
    stage: Stage,
    full_model_accuracy: Option<f64>,
    n: u64,
    d: u64,
}

/// Metadata and shape of a dump, read without touching the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpInfo {
    pub meta: RunMetadata,
    pub rows: usize,
    pub dims: usize,
}

/// Serializes a set to `EMBD` bytes.
pub fn encode(set: &EmbeddingSet) -> Vec<u8> {
    let meta = set.meta();
    let header = DumpHeader {
        model_name: meta.model_name.clone(),
        task_name: meta.task_name.clone(),
        seed: meta.seed,
        split: meta.split,
        stage: meta.stage,
        full_model_accuracy: meta.full_model_accuracy,
        n: set.rows() as u64,
        d: set.dims() as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + set.data().len() * 4 + set.rows());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(set.labels());
    out
}

fn parse_preamble(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 4 {
        return Err(EmbdError::Truncated { field: "magic" });
    }
    if bytes[..4] != MAGIC {
        return Err(EmbdError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < 8 {
        return Err(EmbdError::Truncated { field: "version" });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(EmbdError::UnsupportedVersion { found: version });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(EmbdError::Truncated { field: "header_len" });
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize)
}

fn parse_header(json: &[u8]) -> Result<DumpInfo> {
    let h: DumpHeader = serde_json::from_slice(json).map_err(EmbdError::Header)?;
    let meta = RunMetadata {
        model_name: h.model_name,
        task_name: h.task_name,
        seed: h.seed,
        split: h.split,
        stage: h.stage,
        full_model_accuracy: h.full_model_accuracy,
    };
    meta.validate()?;
    if h.n == 0 {
        return Err(EmbdError::EmptyShape { field: "n" });
    }
    if h.d == 0 {
        return Err(EmbdError::EmptyShape { field: "d" });
    }
    Ok(DumpInfo {
        meta,
        rows: h.n as usize,
        dims: h.d as usize,
    })
}

/// Parses `EMBD` bytes, validating every invariant.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    let header_len = parse_preamble(bytes)?;
    let body = &bytes[PREAMBLE_LEN..];
    if body.len() < header_len {
        return Err(EmbdError::Truncated { field: "header" });
    }
    let info = parse_header(&body[..header_len])?;
    let payload = &body[header_len..];

    let (rows, dims) = (info.rows, info.dims);
    let data_bytes = (rows as u64)
        .checked_mul(dims as u64)
        .and_then(|v| v.checked_mul(4))
        .unwrap_or(u64::MAX);
    if (payload.len() as u64) < data_bytes {
        return Err(EmbdError::PayloadLength {
            rows,
            dims,
            expected: data_bytes,
            actual: payload.len() as u64,
        });
    }
    let (data_raw, label_raw) = payload.split_at(data_bytes as usize);
    if label_raw.len() != rows {
        return Err(EmbdError::LabelLength {
            expected: rows,
            actual: label_raw.len(),
        });
    }
    let data = data_raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(info.meta, rows, dims, data, label_raw.to_vec())
}

pub fn write_dump(set: &EmbeddingSet, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    fs::write(path, encode(set)).map_err(|source| EmbdError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dump(source: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = source.as_ref();
    let bytes = fs::read(path).map_err(|source| EmbdError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Reads only the preamble and JSON header of a dump.
pub fn read_info(source: impl AsRef<Path>) -> Result<DumpInfo> {
    let path = source.as_ref();
    let io_err = |source| EmbdError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(io_err)?;
    let mut preamble = Vec::with_capacity(PREAMBLE_LEN);
    Read::by_ref(&mut file)
        .take(PREAMBLE_LEN as u64)
        .read_to_end(&mut preamble)
        .map_err(io_err)?;
    let header_len = parse_preamble(&preamble)?;
    let mut json = Vec::with_capacity(header_len);
    file.take(header_len as u64).read_to_end(&mut json).map_err(io_err)?;
    if json.len() < header_len {
        return Err(EmbdError::Truncated { field: "header" });
    }
    parse_header(&json)
}

/// True when the file starts with the `EMBD` magic.
pub fn has_magic(path: impl AsRef<Path>) -> bool {
    let mut buf = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .map(|_| buf == MAGIC)
        .unwrap_or(false)
}

/// Parses the CSV fixture form: `d` value columns followed by an integer label
/// column. A single leading header line starting with `#` is allowed.
pub fn parse_csv<R: Read>(reader: R, meta: RunMetadata) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for result in rdr.records() {
        let record = result?;
        let row = record.position().map_or(labels.len() + 1, |p| p.line() as usize);
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(EmbdError::RaggedRow {
                row,
                expected,
                found: record.len(),
            });
        }
        if expected < 2 {
            return Err(EmbdError::EmptyShape { field: "d" });
        }
        for (col, cell) in record.iter().take(expected - 1).enumerate() {
            let v: f32 = cell.parse().map_err(|_| EmbdError::NonNumeric {
                row,
                col,
                cell: cell.to_string(),
            })?;
            data.push(v);
        }
        let cell = &record[expected - 1];
        let label: i64 = cell.parse().map_err(|_| EmbdError::NonNumeric {
            row,
            col: expected - 1,
            cell: cell.to_string(),
        })?;
        match label {
            0 | 1 => labels.push(label as u8),
            _ => {
                return Err(EmbdError::LabelDomain {
                    row,
                    value: cell.to_string(),
                })
            }
        }
    }
    let dims = width.map_or(0, |w| w.saturating_sub(1));
    EmbeddingSet::new(meta, labels.len(), dims, data, labels)
}

pub fn read_csv(source: impl AsRef<Path>, meta: RunMetadata) -> Result<EmbeddingSet> {
    let path = source.as_ref();
    let file = fs::File::open(path).map_err(|source| EmbdError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(std::io::BufReader::new(file), meta)
}

/// Writes a set in the CSV fixture form, with a `#` header line.
pub fn write_csv<W: Write>(set: &EmbeddingSet, mut out: W) -> std::io::Result<()> {
    let names: Vec<String> = (0..set.dims()).map(|i| format!("d{i}")).collect();
    writeln!(out, "# {},label", names.join(","))?;
    for r in 0..set.rows() {
        for v in set.row(r) {
            // `{:?}` prints the shortest representation that round-trips.
            write!(out, "{v:?},")?;
        }
        writeln!(out, "{}", set.labels()[r])?;
    }
    Ok(())
}
