use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::compare::{BenchmarkRow, SummaryRow};
use super::train::{RunRecord, TrainConfig};
use crate::error::Result;

/// Write through a sibling temporary file and rename, so the final path
/// never holds a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub const EPOCH_HEADER: [&str; 8] =
    ["epoch", "lr", "objective", "train_loss", "heldout_loss", "train_accuracy", "heldout_accuracy", "regularizer"];

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    lr: f64,
    objective: f64,
    train_loss: Option<f64>,
    heldout_loss: Option<f64>,
    train_accuracy: Option<f64>,
    heldout_accuracy: Option<f64>,
    regularizer: Option<f64>,
}

fn to_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    std::io::Error::other(e.to_string()).into()
}

/// One row per completed epoch; metrics not evaluated that epoch are empty.
/// Wall times are left to the JSON sidecar so equal runs give equal bytes.
pub fn epochs_csv(record: &RunRecord) -> Result<Vec<u8>> {
    to_csv(
        &EPOCH_HEADER,
        record.epochs.iter().map(|e| EpochRow {
            epoch: e.epoch,
            lr: e.lr,
            objective: e.objective,
            train_loss: e.train_loss,
            heldout_loss: e.heldout_loss,
            train_accuracy: e.train_accuracy,
            heldout_accuracy: e.heldout_accuracy,
            regularizer: e.regularizer,
        }),
    )
}

/// Final diagnostics and timings. Every key is always present.
pub fn run_json(config: &TrainConfig, record: &RunRecord) -> Value {
    let d = record.final_diagnostics.as_ref();
    json!({
        "status": if record.is_failed() { "failed" } else { "completed" },
        "failure": record.failure,
        "seed": record.seed,
        "spec_hash": record.spec_hash,
        "num_params": record.params.len(),
        "epochs_completed": record.epochs.len(),
        "steps": record.step_times.len(),
        "median_step_time": record.median_step_time(),
        "epoch_wall_times": record.epochs.iter().map(|e| e.wall_time).collect::<Vec<_>>(),
        "final": {
            "train_loss": d.map(|d| d.train_loss),
            "heldout_loss": d.map(|d| d.heldout_loss),
            "train_accuracy": d.map(|d| d.train_accuracy),
            "heldout_accuracy": d.map(|d| d.heldout_accuracy),
            "generalization_gap": d.map(|d| d.generalization_gap),
            "exact_trace": d.and_then(|d| d.exact_trace),
            "bound_mu": d.map(|d| d.bound.mu),
            "bound_v": d.map(|d| d.bound.v),
            "stability": d.and_then(|d| d.stability.as_ref()),
        },
        "config": config,
    })
}

pub const SUMMARY_HEADER: [&str; 16] = [
    "variant",
    "runs",
    "failed",
    "failed_seeds",
    "heldout_accuracy_mean",
    "heldout_accuracy_std",
    "heldout_accuracy_se",
    "final_trace_mean",
    "final_trace_std",
    "final_trace_se",
    "generalization_gap_mean",
    "generalization_gap_std",
    "generalization_gap_se",
    "step_time_mean",
    "step_time_std",
    "step_time_se",
];

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    variant: &'a str,
    runs: usize,
    failed: usize,
    failed_seeds: String,
    metrics: [Option<f64>; 12],
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    to_csv(
        &SUMMARY_HEADER,
        rows.iter().map(|r| {
            let m = [r.heldout_accuracy, r.final_trace, r.generalization_gap, r.step_time];
            let mut metrics = [None; 12];
            for (i, s) in m.iter().enumerate() {
                metrics[3 * i] = s.mean;
                metrics[3 * i + 1] = s.std;
                metrics[3 * i + 2] = s.stderr;
            }
            SummaryCsvRow {
                variant: &r.variant,
                runs: r.runs,
                failed: r.failed,
                failed_seeds: r.failed_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
                metrics,
            }
        }),
    )
}

pub const RUNS_HEADER: [&str; 9] = [
    "variant",
    "seed",
    "status",
    "failed_step",
    "heldout_accuracy",
    "final_trace",
    "generalization_gap",
    "median_step_time",
    "final_regularizer",
];

#[derive(Serialize)]
struct RunRow<'a> {
    variant: &'a str,
    seed: u64,
    status: &'static str,
    failed_step: Option<usize>,
    heldout_accuracy: Option<f64>,
    final_trace: Option<f64>,
    generalization_gap: Option<f64>,
    median_step_time: Option<f64>,
    final_regularizer: Option<f64>,
}

/// One row per replicate of a comparison.
pub fn runs_csv(runs: &[(String, RunRecord)]) -> Result<Vec<u8>> {
    to_csv(
        &RUNS_HEADER,
        runs.iter().map(|(variant, r)| {
            let d = r.final_diagnostics.as_ref();
            RunRow {
                variant,
                seed: r.seed,
                status: if r.is_failed() { "failed" } else { "completed" },
                failed_step: r.failure.as_ref().map(|f| f.step),
                heldout_accuracy: d.map(|d| d.heldout_accuracy),
                final_trace: d.and_then(|d| d.exact_trace),
                generalization_gap: d.map(|d| d.generalization_gap),
                median_step_time: r.median_step_time(),
                final_regularizer: r.epochs.last().and_then(|e| e.regularizer),
            }
        }),
    )
}

pub const BENCHMARK_HEADER: [&str; 4] = ["variant", "steps", "median_step_time", "ratio"];

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> Result<Vec<u8>> {
    to_csv(&BENCHMARK_HEADER, rows)
}
