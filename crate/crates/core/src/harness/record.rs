use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Version of the JSON summary layout.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub iter: u64,
    pub stage: usize,
    pub action: String,
    pub reduction_error: f64,
    pub recovery_s: f64,
}

/// Extra per-event measurements kept in the JSON summary only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDetail {
    pub iter: u64,
    pub stages: Vec<usize>,
    pub val_loss_before: f64,
    pub val_loss_after: f64,
    /// Mean squared change of probe outputs caused by the recovery.
    pub function_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub strategy: String,
    pub seed: u64,
    pub iterations_run: u64,
    pub progress: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub target_loss: Option<f64>,
    /// Executed iterations until validation loss first reached the target.
    pub iterations_to_target: Option<u64>,
    /// Optimizer steps of progress at that point (differs under rollback).
    pub progress_to_target: Option<u64>,
    pub iteration_seconds: f64,
    pub total_hours: f64,
    pub failures: usize,
    pub lost_iterations: u64,
    pub unrecoverable: bool,
    pub unrecoverable_reason: Option<String>,
    pub event_details: Vec<EventDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metrics: Vec<MetricRow>,
    pub events: Vec<EventRow>,
    pub summary: RunSummary,
}

impl RunRecord {
    /// First evaluation point at or below `target`.
    pub fn iterations_to(&self, target: f64) -> Option<u64> {
        self.metrics.iter().find(|m| m.val_loss <= target).map(|m| m.iter)
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.val_loss).collect()
    }

    pub fn metrics_csv(&self) -> Result<String> {
        csv_or_header(&self.metrics, "iter,train_loss,val_loss,wall_hours")
    }

    pub fn events_csv(&self) -> Result<String> {
        csv_or_header(&self.events, "iter,stage,action,reduction_error,recovery_s")
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// Writes `metrics.csv`, `events.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        fs::write(dir.join("events.csv"), self.events_csv()?)?;
        fs::write(dir.join("summary.json"), self.summary_json()?)?;
        Ok(())
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Header-only CSV for an empty table, so consumers always see the columns.
pub(crate) fn csv_or_header<T: Serialize>(rows: &[T], header: &str) -> Result<String> {
    if rows.is_empty() {
        Ok(format!("{header}\n"))
    } else {
        to_csv(rows)
    }
}
