//! Run directory outputs: metrics, accuracy matrix, telemetry, resolved config and checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{MindError, Result};
use crate::trainer::{Learner, RunReport, TelemetryRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.mndc";

/// One line of `metrics.csv`. `test_task` is a task id or `all` for the aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub task_trained: usize,
    pub test_task: String,
    pub acc_tag: f64,
    pub acc_taw: f64,
    pub tau: f64,
    pub beta: f64,
}

pub fn metrics_rows(report: &RunReport, run_id: &str) -> Vec<MetricsRow> {
    let mut out = vec![];
    for r in &report.rows {
        let row = |test_task: String, acc_tag, acc_taw| MetricsRow {
            run_id: run_id.to_string(),
            seed: report.seed,
            mode: report.mode.name().to_string(),
            task_trained: r.task_trained,
            test_task,
            acc_tag,
            acc_taw,
            tau: r.tau,
            beta: report.beta,
        };
        for c in 0..=r.task_trained {
            out.push(row(c.to_string(), r.metrics.per_task_tag[c], r.metrics.per_task_taw[c]));
        }
        out.push(row("all".into(), r.metrics.acc_tag, r.metrics.acc_taw));
    }
    out
}

fn csv_err(path: &Path, e: csv::Error) -> MindError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MindError::io(path, io),
        other => MindError::Format {
            field: "csv",
            reason: format!("{}: {other:?}", path.display()),
        },
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| MindError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// `T×T` task-agnostic accuracy matrix with task-id headers; blank where not evaluated.
pub fn matrix_csv(report: &RunReport) -> String {
    let t = report.n_tasks;
    let mut s = String::from("trained\\test");
    for c in 0..t {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for (r, row) in report.acc_matrix().iter().enumerate() {
        s.push_str(&r.to_string());
        for v in row {
            if v.is_nan() {
                s.push(',');
            } else {
                s.push_str(&format!(",{v}"));
            }
        }
        s.push('\n');
    }
    s
}

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let mut s = String::from("task,phase,epoch,loss,ce_part,sd_part,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task,
            r.phase.name(),
            r.epoch,
            r.loss.total,
            r.loss.ce_part,
            r.loss.sd_part,
            r.lr
        ));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MindError::io(path, e))
}

/// Writes every artifact of a finished run into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, config: &RunConfig, report: &RunReport, learner: &Learner, run_id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MindError::io(dir, e))?;
    write_metrics(&dir.join(METRICS_FILE), &metrics_rows(report, run_id))?;
    write_text(&dir.join(MATRIX_FILE), &matrix_csv(report))?;
    write_text(&dir.join(TELEMETRY_FILE), &telemetry_csv(&learner.telemetry))?;
    write_text(&dir.join(CONFIG_FILE), &config.to_toml_string())?;
    Checkpoint::capture(learner).save(dir.join(CHECKPOINT_FILE))
}
