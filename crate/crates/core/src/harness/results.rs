//! Result tables: one CSV row per fit, with wall-clock timings and run
//! metadata kept in separate files so that result tables are reproducible
//! byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Status of a row whose fit succeeded.
pub const STATUS_OK: &str = "ok";
/// Status of a row whose fit raised an error; `message` holds the error.
pub const STATUS_FAILED: &str = "failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Fitting algorithm, or `oracle` / `expert` for reference rows.
    pub algorithm: String,
    pub target: String,
    /// Target demonstrations used.
    pub m: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    /// Exact discounted value, under the true reward, of the greedy policy
    /// for the inferred reward. Empty for failed fits.
    pub value: Option<f64>,
    pub oracle: f64,
    pub expert: f64,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub status: String,
    pub message: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub algorithm: String,
    pub target: String,
    pub m: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub seconds: f64,
}

/// Sidecar written next to every result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub software: String,
    pub command: String,
    pub rng: String,
    /// SHA-256 of the resolved config and the grid text.
    pub config_sha256: String,
    pub rows: usize,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_metadata(path: &Path, meta: &RunMetadata) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<RunMetadata> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
