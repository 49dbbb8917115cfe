//! CSV artifacts: `metrics.csv`, `cost.csv` and `timing.csv`.

use std::fs::{self, File};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cost::CostRow;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub digest: String,
    pub strategy: String,
    pub model: String,
    pub participants: usize,
    pub ratio: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub test_f1: f64,
    /// Standalone run by a party that does not hold labels.
    pub labels_granted: bool,
}

/// Wall-clock time, kept apart so the other reports are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub digest: String,
    pub strategy: String,
    pub seed: u64,
    pub epoch: usize,
    pub wall_seconds: f64,
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Writes the three reports into `dir`, replacing earlier files.
pub fn emit_report(dir: &Path, rows: &[MetricsRow], cost: &[CostRow], timing: &[TimingRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Input("no metrics rows to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join("metrics.csv"), &[], rows)?;
    write_rows(
        &dir.join("cost.csv"),
        &[
            "digest",
            "seed",
            "participants",
            "batch_size",
            "hidden",
            "rounds",
            "batch_rounds",
            "model_params",
            "sl_bytes",
            "fl_bytes",
        ],
        cost,
    )?;
    write_rows(
        &dir.join("timing.csv"),
        &["digest", "strategy", "seed", "epoch", "wall_seconds"],
        timing,
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path)
}

pub fn read_cost(path: &Path) -> Result<Vec<CostRow>> {
    read_rows(path)
}
