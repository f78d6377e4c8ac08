//! Datasets, SGD training with an optional trace penalty, seed-replicated
//! comparisons and step timing.

mod compare;
mod data;
mod optim;
mod output;
mod train;

pub use compare::{benchmark, compare_experiment, summarize, BenchmarkRow, CompareResult, MetricSummary, SummaryRow, Variant, BASELINE};
pub use data::{make_dataset, DatasetKind, DatasetSpec};
pub use optim::{sgd_step, LrSchedule, OptimizerConfig, OptimizerState};
pub use output::{benchmark_csv, epochs_csv, run_json, runs_csv, summary_csv, write_atomic, BENCHMARK_HEADER, EPOCH_HEADER, RUNS_HEADER, SUMMARY_HEADER};
pub use train::{
    init_seed, train, train_observed, DiagnosticsConfig, EpochRecord, Failure, FinalDiagnostics, RunRecord, StepOutcome, TrainConfig, Trainer,
};

/// SplitMix64 of `seed + salt`: independent-looking seeds for each consumer.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
