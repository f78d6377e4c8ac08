use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{make_dataset, DatasetKind, DatasetSpec};
use super::optim::{sgd_step, OptimizerConfig, OptimizerState};
use super::{derive_seed, median};
use crate::autodiff::Objective;
use crate::dynamics::{stability_report, StabilityReport};
use crate::error::{Error, Result};
use crate::estimators::{exact_trace, regularized_loss, trace_term, EstimatorConfig, EstimatorRng, OracleGuard};
use crate::model::{accuracy, Activation, bound_diagnostics, empirical_loss, Batch, BoundDiagnostics, MlpLoss, ModelSpec};
use crate::params::{FlatVector, LayerRegistry, ParamStore};

const INIT_SALT: u64 = 1;
const SHUFFLE_SALT: u64 = 2;
const ESTIMATOR_SALT: u64 = 3;

/// Seed used for the model initialization of a run with seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, INIT_SALT)
}

/// Which end-of-run oracles to compute, and the parameter counts they allow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub exact_trace: bool,
    pub stability: bool,
    pub trace_limit: usize,
    /// The eigendecomposition is cubic in the parameter count.
    pub stability_limit: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { exact_trace: true, stability: true, trace_limit: 10_000, stability_limit: 2_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub data: DatasetSpec,
    pub optimizer: OptimizerConfig,
    /// `None` trains on the full training set every step, in dataset order.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// `None` is the unregularized baseline.
    pub estimator: Option<EstimatorConfig>,
    /// Drives initialization, batch order and estimator probes. The dataset
    /// has its own seed so replicates share data.
    pub seed: u64,
    /// Evaluate full-set metrics every this many epochs (and after the last).
    pub eval_every: usize,
    pub diagnostics: DiagnosticsConfig,
}

impl TrainConfig {
    pub fn new(model: ModelSpec, data: DatasetSpec, optimizer: OptimizerConfig, epochs: usize) -> Self {
        Self {
            model,
            data,
            optimizer,
            batch_size: Some(32),
            epochs,
            estimator: None,
            seed: 0,
            eval_every: 1,
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    /// Two interleaved spirals (1000 points, noise 0.1) and a 2-16-16-2 tanh
    /// network trained by SGD with momentum 0.9, lr 0.1, batch 32.
    pub fn spirals_reference(epochs: usize) -> Self {
        let data = DatasetSpec::synthetic(DatasetKind::Spirals, 1000, 2, 2, 0.1);
        let model = ModelSpec::new(2, vec![16, 16], 2, Activation::Tanh);
        let optimizer = OptimizerConfig { momentum: 0.9, ..OptimizerConfig::sgd(0.1) };
        Self::new(model, data, optimizer, epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim {} differs from data.input_dim {}",
                self.model.input_dim, self.data.input_dim
            )));
        }
        if self.model.classes != self.data.classes {
            return Err(Error::Config(format!(
                "model.classes {} differs from data.classes {}",
                self.model.classes, self.data.classes
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if let Some(est) = &self.estimator {
            est.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective over the epoch's steps, regularizer included.
    pub objective: f64,
    pub train_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    /// Mean per-step trace estimate; `None` without an estimator.
    pub regularizer: Option<f64>,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// 0-based global step at which the objective or update went non-finite.
    pub step: usize,
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalDiagnostics {
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// `|train_loss − heldout_loss|`.
    pub generalization_gap: f64,
    /// Trace of the training-loss Hessian; `None` when disabled or over the guard.
    pub exact_trace: Option<f64>,
    pub stability: Option<StabilityReport>,
    pub bound: BoundDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Seconds per optimizer step.
    pub step_times: Vec<f64>,
    pub failure: Option<Failure>,
    pub final_diagnostics: Option<FinalDiagnostics>,
    pub params: ParamStore,
    pub spec_hash: String,
}

impl RunRecord {
    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn median_step_time(&self) -> Option<f64> {
        median(&self.step_times)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub objective: f64,
    pub regularizer: Option<f64>,
}

/// One training run, advanced a step at a time.
pub struct Trainer {
    config: TrainConfig,
    train: Batch,
    heldout: Batch,
    registry: LayerRegistry,
    params: FlatVector,
    state: OptimizerState,
    step: usize,
    shuffle_rng: ChaCha8Rng,
    estimator_seed: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, heldout) = make_dataset(&config.data)?;
        Self::with_data(config, train, heldout)
    }

    pub fn with_data(mut config: TrainConfig, train: Batch, heldout: Batch) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || heldout.is_empty() {
            return Err(Error::Precondition("train and heldout sets must be nonempty".into()));
        }
        config.model.seed = init_seed(config.seed);
        let init = config.model.init_params()?;
        Ok(Self {
            registry: config.model.registry(),
            params: init.values,
            state: OptimizerState::default(),
            step: 0,
            shuffle_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_SALT)),
            estimator_seed: derive_seed(config.seed, ESTIMATOR_SALT),
            train,
            heldout,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn train_set(&self) -> &Batch {
        &self.train
    }

    pub fn heldout_set(&self) -> &Batch {
        &self.heldout
    }

    /// Global 0-based index of the next step.
    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Row sets for the next epoch; a single `None` means full batch.
    pub fn epoch_batches(&mut self) -> Vec<Option<Vec<usize>>> {
        match self.config.batch_size {
            None => vec![None],
            Some(b) => {
                let mut rows: Vec<usize> = (0..self.train.len()).collect();
                rows.shuffle(&mut self.shuffle_rng);
                rows.chunks(b).map(|c| Some(c.to_vec())).collect()
            }
        }
    }

    /// Forward, optional trace penalty, backward and one SGD update.
    pub fn step(&mut self, rows: Option<&[usize]>, lr: f64) -> Result<StepOutcome> {
        let selected;
        let batch = match rows {
            None => &self.train,
            Some(r) => {
                selected = self.train.select(r);
                &selected
            }
        };
        let objective = MlpLoss::new(&self.config.model, batch)?;
        let mut rec = objective.record(&self.params)?;
        let emp = rec.loss;
        if !rec.graph.scalar(emp).is_finite() {
            return Err(Error::Numeric("non-finite empirical loss".into()));
        }
        let (loss, regularizer) = match &self.config.estimator {
            None => (emp, None),
            Some(est) => {
                let mut rng = EstimatorRng::for_step(self.estimator_seed, self.step as u64);
                let term = trace_term(&mut rec, &self.registry, est, &mut rng)?;
                let loss = match term.node {
                    Some(node) => regularized_loss(&mut rec.graph, emp, node, est.lambda)?,
                    None => emp,
                };
                (loss, Some(term.estimate.mean))
            }
        };
        let nodes = rec.leaf_nodes();
        let grads = rec.graph.gradient(loss, &nodes)?;
        let leaves = rec.leaves.clone();
        let grad = rec.flatten(self.params.len(), &leaves, &grads);
        let value = rec.graph.scalar(loss);
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric("non-finite objective or gradient".into()));
        }
        sgd_step(&mut self.params, &grad, &mut self.state, &self.config.optimizer, lr)?;
        self.step += 1;
        Ok(StepOutcome { objective: value, regularizer })
    }

    fn evaluate(&self) -> Result<(f64, f64, f64, f64)> {
        let spec = &self.config.model;
        Ok((
            empirical_loss(spec, &self.params, &self.train)?,
            empirical_loss(spec, &self.params, &self.heldout)?,
            accuracy(spec, &self.params, &self.train)?,
            accuracy(spec, &self.params, &self.heldout)?,
        ))
    }

    fn final_diagnostics(&self) -> Result<FinalDiagnostics> {
        let spec = &self.config.model;
        let diag = &self.config.diagnostics;
        let (train_loss, heldout_loss, train_accuracy, heldout_accuracy) = self.evaluate()?;
        let objective = MlpLoss::new(spec, &self.train)?;
        let n = self.params.len();
        let exact = if diag.exact_trace && n <= diag.trace_limit {
            Some(exact_trace(&objective, &self.params, OracleGuard { limit: diag.trace_limit, override_limit: false })?)
        } else {
            None
        };
        let stability = if diag.stability && n <= diag.stability_limit {
            Some(stability_report(&objective, &self.params, OracleGuard { limit: diag.stability_limit, override_limit: false })?)
        } else {
            None
        };
        Ok(FinalDiagnostics {
            train_loss,
            heldout_loss,
            train_accuracy,
            heldout_accuracy,
            generalization_gap: (train_loss - heldout_loss).abs(),
            exact_trace: exact,
            stability,
            bound: bound_diagnostics(spec, &self.params, &self.train)?,
        })
    }

    fn into_params(self) -> Result<ParamStore> {
        ParamStore::new(self.params, self.registry)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Numeric(_))
}

pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    train_observed(config, &mut |_, _| {})
}

/// [`train`], calling `observer(step, params)` on the initial parameters
/// (step 0) and after every update.
pub fn train_observed(config: &TrainConfig, observer: &mut dyn FnMut(usize, &[f64])) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_times = Vec::new();
    let mut failure = None;
    observer(0, trainer.params());

    'epochs: for epoch in 0..config.epochs {
        let lr = config.optimizer.lr_at(epoch);
        let start = Instant::now();
        let (mut obj_sum, mut reg_sum, mut count) = (0.0, 0.0, 0usize);
        for rows in trainer.epoch_batches() {
            let t0 = Instant::now();
            match trainer.step(rows.as_deref(), lr) {
                Ok(out) => {
                    step_times.push(t0.elapsed().as_secs_f64());
                    obj_sum += out.objective;
                    reg_sum += out.regularizer.unwrap_or(0.0);
                    count += 1;
                    observer(trainer.step_index(), trainer.params());
                }
                Err(e) if is_divergence(&e) => {
                    failure = Some(Failure { step: trainer.step_index(), epoch: epoch + 1, message: e.to_string() });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let last = epoch + 1 == config.epochs;
        let metrics = if last || (epoch + 1) % config.eval_every == 0 {
            match trainer.evaluate() {
                Ok(m) => Some(m),
                Err(e) if is_divergence(&e) => {
                    failure = Some(Failure { step: trainer.step_index(), epoch: epoch + 1, message: e.to_string() });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            objective: obj_sum / count as f64,
            train_loss: metrics.map(|m| m.0),
            heldout_loss: metrics.map(|m| m.1),
            train_accuracy: metrics.map(|m| m.2),
            heldout_accuracy: metrics.map(|m| m.3),
            regularizer: config.estimator.as_ref().map(|_| reg_sum / count as f64),
            wall_time: start.elapsed().as_secs_f64(),
        });
    }

    let final_diagnostics = match failure {
        Some(_) => None,
        None => match trainer.final_diagnostics() {
            Ok(d) => Some(d),
            Err(e) if is_divergence(&e) => {
                failure = Some(Failure { step: trainer.step_index(), epoch: config.epochs, message: e.to_string() });
                None
            }
            Err(e) => return Err(e),
        },
    };
    Ok(RunRecord {
        seed: config.seed,
        epochs,
        step_times,
        failure,
        final_diagnostics,
        spec_hash: config.model.hash(),
        params: trainer.into_params()?,
    })
}
