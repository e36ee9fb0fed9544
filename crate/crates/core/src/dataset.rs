//! Dataset files: a JSON sidecar header plus a binary row block with one
//! little-endian u16 token per position, row-major. Rows are always clean
//! (no MASK tokens).

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::TokenSeq;
use crate::error::{Error, Result};
use crate::estimators::SampleSource;
use crate::rng::Stream;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetHeader {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: u16,
    pub block_split: Option<usize>,
    pub n_rows: usize,
    pub seed: u64,
    pub ground_truth_mi: Option<f64>,
    pub ground_truth_entropy: Option<f64>,
}

/// `<base>.json` and `<base>.bin`; a trailing `.bin`/`.json` on the input is
/// stripped first, so either file (or the bare stem) names the dataset.
pub fn dataset_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_dataset(base: &Path, header: &DatasetHeader, rows: &[TokenSeq]) -> Result<()> {
    if rows.len() != header.n_rows {
        return Err(Error::InvalidInput(format!(
            "header says {} rows, got {}",
            header.n_rows,
            rows.len()
        )));
    }
    let mut bytes = Vec::with_capacity(rows.len() * header.m * 2);
    for row in rows {
        if row.len() != header.m || row.vocab() != header.n {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", header.m, header.n),
                got: format!("({}, {})", row.len(), row.vocab()),
            });
        }
        if row.has_mask() {
            return Err(Error::InvalidInput("dataset rows must be clean".into()));
        }
        for &t in row.tokens() {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    let (json_path, bin_path) = dataset_paths(base);
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&json_path, serde_json::to_string_pretty(header)?)?;
    std::fs::write(&bin_path, bytes)?;
    Ok(())
}

pub fn read_dataset(base: &Path) -> Result<(DatasetHeader, Vec<TokenSeq>)> {
    let (json_path, bin_path) = dataset_paths(base);
    let header: DatasetHeader = serde_json::from_str(
        &std::fs::read_to_string(&json_path)
            .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?,
    )
    .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    let bytes = std::fs::read(&bin_path)?;
    let expect = header.n_rows * header.m * 2;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "row block is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(header.n_rows);
    for r in 0..header.n_rows {
        let mut tokens = Vec::with_capacity(header.m);
        for i in 0..header.m {
            let at = (r * header.m + i) * 2;
            let tok = u16::from_le_bytes([bytes[at], bytes[at + 1]]);
            if tok >= header.n {
                return Err(Error::Format(format!(
                    "token {tok} out of range at row {r}, position {i}"
                )));
            }
            tokens.push(tok);
        }
        rows.push(TokenSeq::new(tokens, header.n)?);
    }
    Ok((header, rows))
}

/// Plain-text export: one comma-separated row per line.
pub fn export_csv(base: &Path, out: &Path) -> Result<()> {
    let (_, rows) = read_dataset(base)?;
    let mut text = String::new();
    for row in &rows {
        let cells: Vec<String> = row.tokens().iter().map(|t| t.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(out, text)?;
    Ok(())
}

/// In-memory rows drawn uniformly with replacement.
pub struct RowsSource {
    rows: Vec<TokenSeq>,
    m: usize,
    n: u16,
}

impl RowsSource {
    pub fn new(rows: Vec<TokenSeq>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
        let (m, n) = (first.len(), first.vocab());
        if rows.iter().any(|r| r.len() != m || r.vocab() != n) {
            return Err(Error::InvalidInput("inconsistent row shapes".into()));
        }
        Ok(Self { rows, m, n })
    }

    pub fn rows(&self) -> &[TokenSeq] {
        &self.rows
    }
}

impl SampleSource for RowsSource {
    fn shape(&self) -> (usize, u16) {
        (self.m, self.n)
    }

    fn sample(&self, rng: &mut Stream) -> TokenSeq {
        self.rows[rng.random_range(0..self.rows.len())].clone()
    }
}
