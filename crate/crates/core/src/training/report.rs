//! CSV artifacts: runs, loss curves, ablation table, sweeps and per-sample
//! predictions. Every writer has a matching reader.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ablation::{AblationRow, RunFailure};
use super::sweep::SweepPoint;
use super::train::{CurvePoint, PredictionRow, RunResult};
use crate::error::Result;

/// Flat `runs.csv` row. Failed runs have `status = failed` and an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config: String,
    pub fold: usize,
    pub seed: u64,
    pub status: String,
    pub mse: Option<f64>,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub config: String,
    pub fold: usize,
    pub seed: u64,
    pub epoch: usize,
    pub train_j: f64,
    pub val_j: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::error::Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Into::into)).collect()
}

pub fn run_rows(runs: &[RunResult], failures: &[RunFailure]) -> Vec<RunRow> {
    let mut rows: Vec<RunRow> = runs
        .iter()
        .map(|r| RunRow {
            config: r.config.clone(),
            fold: r.fold,
            seed: r.seed,
            status: "ok".into(),
            mse: Some(r.mse),
            epochs_run: Some(r.epochs_run),
            best_epoch: Some(r.best_epoch),
            error: None,
        })
        .collect();
    rows.extend(failures.iter().map(|f| RunRow {
        config: f.config.clone(),
        fold: f.fold,
        seed: f.seed,
        status: "failed".into(),
        mse: None,
        epochs_run: None,
        best_epoch: None,
        error: Some(f.error.clone()),
    }));
    rows
}

const RUN_HEADER: [&str; 8] = ["config", "fold", "seed", "status", "mse", "epochs_run", "best_epoch", "error"];

pub fn write_runs_csv(path: impl AsRef<Path>, runs: &[RunResult], failures: &[RunFailure]) -> Result<()> {
    write_rows(path.as_ref(), &run_rows(runs, failures), &RUN_HEADER)
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunRow>> {
    read_rows(path.as_ref())
}

pub fn write_curves_csv(path: impl AsRef<Path>, runs: &[RunResult]) -> Result<()> {
    let rows: Vec<CurveRow> = runs
        .iter()
        .flat_map(|r| {
            r.curve.iter().map(move |c: &CurvePoint| CurveRow {
                config: r.config.clone(),
                fold: r.fold,
                seed: r.seed,
                epoch: c.epoch,
                train_j: c.train_j,
                val_j: c.val_j,
            })
        })
        .collect();
    write_rows(path.as_ref(), &rows, &["config", "fold", "seed", "epoch", "train_j", "val_j"])
}

pub fn read_curves_csv(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    read_rows(path.as_ref())
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    write_rows(
        path.as_ref(),
        rows,
        &[
            "config",
            "n_runs",
            "mean_mse",
            "std_mse",
            "pct_delta",
            "h_statistic",
            "p_raw",
            "p_adjusted",
            "significant",
        ],
    )
}

pub fn read_ablation_csv(path: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    read_rows(path.as_ref())
}

pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    write_rows(path.as_ref(), points, &["grid_value", "mean_prediction", "training_mean"])
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepPoint>> {
    read_rows(path.as_ref())
}

pub fn write_predictions_csv(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    write_rows(path.as_ref(), rows, &["id", "label", "mu", "log_sigma"])
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    read_rows(path.as_ref())
}
