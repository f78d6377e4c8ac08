use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::median;
use super::train::{train, RunRecord, TrainConfig, Trainer};
use crate::error::{Error, Result};

/// A named configuration in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Self { name: name.into(), config }
    }
}

/// Mean, sample standard deviation and standard error over the runs that
/// produced a value. Spread is `None` below two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub stderr: Option<f64>,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let k = values.len();
        if k == 0 {
            return Self { count: 0, mean: None, std: None, stderr: None };
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        if k < 2 {
            return Self { count: k, mean: Some(mean), std: None, stderr: None };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let std = var.sqrt();
        Self { count: k, mean: Some(mean), std: Some(std), stderr: Some(std / (k as f64).sqrt()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub failed: usize,
    /// Seeds of failed runs; these are excluded from every metric.
    pub failed_seeds: Vec<u64>,
    pub heldout_accuracy: MetricSummary,
    pub final_trace: MetricSummary,
    pub generalization_gap: MetricSummary,
    /// Per-run median seconds per step.
    pub step_time: MetricSummary,
}

pub fn summarize(variant: &str, records: &[RunRecord]) -> SummaryRow {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.is_failed()).collect();
    let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    SummaryRow {
        variant: variant.to_string(),
        runs: records.len(),
        failed: records.len() - ok.len(),
        failed_seeds: records.iter().filter(|r| r.is_failed()).map(|r| r.seed).collect(),
        heldout_accuracy: MetricSummary::from_values(&collect(&|r| r.final_diagnostics.as_ref().map(|d| d.heldout_accuracy))),
        final_trace: MetricSummary::from_values(&collect(&|r| r.final_diagnostics.as_ref().and_then(|d| d.exact_trace))),
        generalization_gap: MetricSummary::from_values(&collect(&|r| r.final_diagnostics.as_ref().map(|d| d.generalization_gap))),
        step_time: MetricSummary::from_values(&collect(&|r| r.median_step_time())),
    }
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub rows: Vec<SummaryRow>,
    /// `(variant, record)` in variant-then-replicate order.
    pub runs: Vec<(String, RunRecord)>,
}

/// Run every variant with seeds `seed, seed + 1, …, seed + n_seeds − 1`.
///
/// Replicates run in parallel; the reduction order is fixed. Parallel
/// execution inflates the step-time column; use [`benchmark`] for timing.
pub fn compare_experiment(variants: &[Variant], n_seeds: usize) -> Result<CompareResult> {
    if n_seeds < 2 {
        return Err(Error::Config(format!("compare needs at least 2 seeds, got {n_seeds}")));
    }
    if variants.is_empty() {
        return Err(Error::Config("compare needs at least one variant".into()));
    }
    for v in variants {
        v.config.validate()?;
    }
    let jobs: Vec<(usize, TrainConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            (0..n_seeds as u64).map(move |r| (i, TrainConfig { seed: v.config.seed.wrapping_add(r), ..v.config.clone() }))
        })
        .collect();
    let records: Vec<RunRecord> = jobs.par_iter().map(|(_, c)| train(c)).collect::<Result<_>>()?;
    let mut runs = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(variants.len());
    for (i, chunk) in records.chunks(n_seeds).enumerate() {
        rows.push(summarize(&variants[i].name, chunk));
        runs.extend(chunk.iter().cloned().map(|r| (variants[i].name.clone(), r)));
    }
    Ok(CompareResult { rows, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub variant: String,
    pub steps: usize,
    /// Seconds.
    pub median_step_time: f64,
    /// Median step time over the baseline's.
    pub ratio: f64,
}

pub const BASELINE: &str = "baseline";

/// Median per-step wall time of each variant over `steps` timed steps
/// after `warmup` untimed ones. Variants are stepped round-robin so slow
/// drifts in machine speed hit all of them alike. One variant must be
/// named [`BASELINE`].
pub fn benchmark(variants: &[Variant], steps: usize, warmup: usize) -> Result<Vec<BenchmarkRow>> {
    let base = variants
        .iter()
        .position(|v| v.name == BASELINE)
        .ok_or_else(|| Error::Config(format!("benchmark needs a variant named '{BASELINE}' for ratios")))?;
    if steps < 1 {
        return Err(Error::Config("benchmark needs at least one timed step".into()));
    }
    struct Lane {
        trainer: Trainer,
        queue: Vec<Option<Vec<usize>>>,
        epoch: usize,
        times: Vec<f64>,
    }
    let mut lanes = variants
        .iter()
        .map(|v| Trainer::new(v.config.clone()).map(|trainer| Lane { trainer, queue: Vec::new(), epoch: 0, times: Vec::new() }))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..warmup + steps {
        for lane in &mut lanes {
            if lane.queue.is_empty() {
                lane.queue = lane.trainer.epoch_batches();
                lane.queue.reverse();
                lane.epoch += 1;
            }
            let rows = lane.queue.pop().expect("refilled");
            let lr = lane.trainer.config().optimizer.lr_at(lane.epoch - 1);
            let t0 = std::time::Instant::now();
            lane.trainer.step(rows.as_deref(), lr)?;
            let dt = t0.elapsed().as_secs_f64();
            if i >= warmup {
                lane.times.push(dt);
            }
        }
    }
    let medians: Vec<f64> = lanes.iter().map(|l| median(&l.times).expect("steps >= 1")).collect();
    Ok(variants
        .iter()
        .zip(&medians)
        .map(|(v, &m)| BenchmarkRow { variant: v.name.clone(), steps, median_step_time: m, ratio: m / medians[base] })
        .collect())
}
