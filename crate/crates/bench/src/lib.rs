//! Shared fixtures for the criterion benchmarks.

use hessreg::harness::{DatasetKind, DatasetSpec, OptimizerConfig, TrainConfig, Trainer};
use hessreg::estimators::EstimatorConfig;
pub use hessreg::problems::ReferenceMlp;

/// A full-batch trainer on the reference network's data.
pub fn reference_trainer(estimator: Option<EstimatorConfig>) -> Trainer {
    let f = ReferenceMlp::new(0);
    let data = DatasetSpec::synthetic(DatasetKind::Blobs, f.batch.len(), f.spec.input_dim, f.spec.classes, 0.0);
    let mut config = TrainConfig::new(f.spec.clone(), data, OptimizerConfig::sgd(0.01), 1);
    config.batch_size = None;
    config.estimator = estimator;
    Trainer::with_data(config, f.batch.clone(), f.batch).expect("reference fixture is valid")
}
