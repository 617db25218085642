//! Per-epoch result records, written as CSV and JSON.

use std::fs;
use std::path::Path;

use hfw_core::fewshot::MetricsSummary;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// CSV header, in column order.
pub const COLUMNS: [&str; 14] = [
    "run_id",
    "epoch",
    "split",
    "episodes",
    "acc_mean",
    "acc_ci95",
    "precision_macro",
    "recall_macro",
    "f1_macro",
    "loss_mean",
    "lr",
    "eta_values",
    "lambda_values",
    "wall_seconds",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub episodes: usize,
    pub acc_mean: f64,
    /// `None` when only one episode was evaluated.
    pub acc_ci95: Option<f64>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub loss_mean: f64,
    pub lr: f64,
    /// One entry per HFW module, in placement order.
    pub eta_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run_id: &str,
        epoch: usize,
        split: &str,
        s: &MetricsSummary,
        lr: f64,
        plasticity: &[(f64, f64)],
        wall_seconds: f64,
    ) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            epoch,
            split: split.to_string(),
            episodes: s.episodes,
            acc_mean: s.acc_mean,
            acc_ci95: s.acc_ci95,
            precision_macro: s.precision_macro,
            recall_macro: s.recall_macro,
            f1_macro: s.f1_macro,
            loss_mean: s.loss_mean,
            lr,
            eta_values: plasticity.iter().map(|p| p.0).collect(),
            lambda_values: plasticity.iter().map(|p| p.1).collect(),
            wall_seconds,
        }
    }

    fn record(&self) -> Vec<String> {
        let list = |v: &[f64]| serde_json::to_string(v).expect("floats serialize");
        vec![
            self.run_id.clone(),
            self.epoch.to_string(),
            self.split.clone(),
            self.episodes.to_string(),
            self.acc_mean.to_string(),
            self.acc_ci95.map(|c| c.to_string()).unwrap_or_default(),
            self.precision_macro.to_string(),
            self.recall_macro.to_string(),
            self.f1_macro.to_string(),
            self.loss_mean.to_string(),
            self.lr.to_string(),
            list(&self.eta_values),
            list(&self.lambda_values),
            self.wall_seconds.to_string(),
        ]
    }
}

/// Renders rows as CSV with the fixed header. Lists are JSON arrays; an
/// undefined ci95 is an empty cell.
pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| AppError::Format(e.to_string());
    w.write_record(COLUMNS).map_err(fail)?;
    for r in rows {
        w.write_record(r.record()).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, to_csv(rows)?).map_err(|e| AppError::io(path, e))
}

/// Parses CSV produced by [`to_csv`].
pub fn read_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str| AppError::Format(format!("metrics csv: bad {what}"));
    let header: Vec<String> = r
        .headers()
        .map_err(|e| AppError::Format(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != COLUMNS {
        return Err(bad("header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| AppError::Format(e.to_string()))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(COLUMNS[i]));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(COLUMNS[i]));
        let l = |i: usize| serde_json::from_str::<Vec<f64>>(&rec[i]).map_err(|_| bad(COLUMNS[i]));
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            epoch: u(1)?,
            split: rec[2].to_string(),
            episodes: u(3)?,
            acc_mean: f(4)?,
            acc_ci95: if rec[5].is_empty() { None } else { Some(f(5)?) },
            precision_macro: f(6)?,
            recall_macro: f(7)?,
            f1_macro: f(8)?,
            loss_mean: f(9)?,
            lr: f(10)?,
            eta_values: l(11)?,
            lambda_values: l(12)?,
            wall_seconds: f(13)?,
        });
    }
    Ok(rows)
}
