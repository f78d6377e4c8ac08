//! Typed configuration built from resolved [`Settings`].

use hessreg::estimators::{EstimatorConfig, EstimatorMode, OracleGuard};
use hessreg::harness::{init_seed, make_dataset, DatasetKind, DatasetSpec, DiagnosticsConfig, LrSchedule, OptimizerConfig, TrainConfig};
use hessreg::model::{Activation, Batch, MlpLoss, ModelSpec};
use hessreg::problems::Quadratic;
use hessreg::{Objective, ParamStore};
use ndarray::Array2;

use crate::config::{ConfigError, Settings};
use crate::error::CliError;

pub fn model_spec(s: &Settings) -> Result<ModelSpec, ConfigError> {
    let classes: usize = s.require("model.classes")?;
    let input_dim = match s.get("model.input_dim")? {
        Some(d) => d,
        None => s.get("data.input_dim")?.ok_or_else(|| ConfigError::missing("model.input_dim"))?,
    };
    let hidden = s.list("model.hidden")?.unwrap_or_default();
    let activation: Activation = s.get_or("model.activation", Activation::Tanh)?;
    let mut spec = ModelSpec::new(input_dim, hidden, classes, activation);
    spec.regularize_biases = s.get_or("model.regularize_biases", true)?;
    Ok(spec)
}

pub fn dataset_spec(s: &Settings, model: &ModelSpec) -> Result<DatasetSpec, ConfigError> {
    let kind: DatasetKind = s.require("data.kind")?;
    let train_fraction: f64 = s.get_or("data.train_fraction", 0.8)?;
    Ok(DatasetSpec {
        kind,
        size: s.get_or("data.size", 1000)?,
        input_dim: s.get_or("data.input_dim", model.input_dim)?,
        classes: s.get_or("data.classes", model.classes)?,
        noise: s.get_or("data.noise", 0.0)?,
        train_fraction,
        heldout_fraction: s.get_or("data.heldout_fraction", 1.0 - train_fraction)?,
        seed: s.get_or("data.seed", 0)?,
        csv_path: s.get("data.csv_path")?,
    })
}

pub fn optimizer(s: &Settings) -> Result<OptimizerConfig, ConfigError> {
    let schedule = match s.raw("optimizer.schedule").unwrap_or("constant") {
        "constant" => LrSchedule::Constant,
        "step" => LrSchedule::StepDecay {
            factor: s.get_or("optimizer.decay_factor", 0.1)?,
            milestones: s.list("optimizer.milestones")?.unwrap_or_default(),
        },
        other => return Err(s.error("optimizer.schedule", format!("unknown schedule '{other}' (constant | step)"))),
    };
    Ok(OptimizerConfig {
        lr: s.get_or("optimizer.lr", 0.01)?,
        momentum: s.get_or("optimizer.momentum", 0.0)?,
        weight_decay: s.get_or("optimizer.weight_decay", 0.0)?,
        schedule,
    })
}

/// `None` when `estimator.mode` is absent or `none`.
pub fn estimator(s: &Settings, seed: u64, require_lambda: bool) -> Result<Option<EstimatorConfig>, ConfigError> {
    let mode = match s.raw("estimator.mode").unwrap_or("none") {
        "none" => return Ok(None),
        _ => s.require::<EstimatorMode>("estimator.mode")?,
    };
    let lambda = if require_lambda { s.require("estimator.lambda")? } else { s.get_or("estimator.lambda", 0.0)? };
    let mut config = EstimatorConfig { mode, lambda, max_iter: s.get_or("estimator.max_iter", 1)?, seed, ..EstimatorConfig::default() };
    if mode == EstimatorMode::SehtD {
        let prob: Option<f64> = s.get("estimator.prob")?;
        config.p1 = s.get("estimator.p1")?.or(prob).ok_or_else(|| ConfigError::missing("estimator.prob"))?;
        config.p2 = s.get("estimator.p2")?.or(prob).ok_or_else(|| ConfigError::missing("estimator.prob"))?;
    }
    config.rescale_unbiased = s.get_or("estimator.rescale_unbiased", false)?;
    config.detach_trace = s.get_or("estimator.detach_trace", false)?;
    Ok(Some(config))
}

struct BatchSize(Option<usize>);

impl std::str::FromStr for BatchSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(Self(None));
        }
        s.parse().map(|n| Self(Some(n))).map_err(|_| "expected a positive integer or 'full'".to_string())
    }
}

pub fn seed(s: &Settings, seed_override: Option<u64>) -> Result<u64, ConfigError> {
    match seed_override {
        Some(v) => Ok(v),
        None => s.get_or("train.seed", 0),
    }
}

pub fn train_config(s: &Settings, seed_override: Option<u64>) -> Result<TrainConfig, ConfigError> {
    let model = model_spec(s)?;
    let data = dataset_spec(s, &model)?;
    let seed = seed(s, seed_override)?;
    let defaults = DiagnosticsConfig::default();
    Ok(TrainConfig {
        data,
        optimizer: optimizer(s)?,
        batch_size: s.get_or("train.batch_size", BatchSize(Some(32)))?.0,
        epochs: s.require("train.epochs")?,
        estimator: estimator(s, seed, true)?,
        seed,
        eval_every: s.get_or("train.eval_every", 1)?,
        diagnostics: DiagnosticsConfig {
            exact_trace: s.get_or("diagnostics.exact_trace", defaults.exact_trace)?,
            stability: s.get_or("diagnostics.stability", defaults.stability)?,
            trace_limit: s.get_or("diagnostics.trace_limit", defaults.trace_limit)?,
            stability_limit: s.get_or("diagnostics.stability_limit", defaults.stability_limit)?,
        },
        model,
    })
}

pub fn oracle_guard(s: &Settings) -> Result<OracleGuard, ConfigError> {
    let d = OracleGuard::default();
    Ok(OracleGuard { limit: s.get_or("oracle.limit", d.limit)?, override_limit: s.get_or("oracle.override", d.override_limit)? })
}

/// Rows separated by `;`, entries by whitespace.
fn parse_matrix(s: &Settings) -> Result<Array2<f64>, ConfigError> {
    let text = s.raw("problem.matrix").unwrap_or("2 1; 1 3");
    let bad = |m: &str| s.error("problem.matrix", m.to_string());
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| r.split_whitespace().map(str::parse).collect::<Result<Vec<f64>, _>>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(&format!("invalid entry: {e}")))?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(bad("matrix must be square"));
    }
    let a = Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]);
    if (0..n).any(|i| (0..n).any(|j| a[[i, j]] != a[[j, i]])) {
        return Err(bad("matrix must be symmetric"));
    }
    Ok(a)
}

/// A loss and the point at which to analyse it.
pub enum Problem {
    Quadratic { objective: Quadratic, point: Vec<f64> },
    Mlp { spec: ModelSpec, batch: Batch, params: Vec<f64> },
}

impl Problem {
    pub fn from_settings(s: &Settings, seed_override: Option<u64>) -> Result<Self, CliError> {
        let kind = s.raw("problem.kind").unwrap_or("mlp");
        let quadratic = |a: Array2<f64>| -> Result<Self, CliError> {
            let n = a.nrows();
            let point = s.list("problem.point")?.unwrap_or_else(|| vec![0.0; n]);
            if point.len() != n {
                return Err(s.error("problem.point", format!("expected {n} coordinates, got {}", point.len())).into());
            }
            Ok(Self::Quadratic { objective: Quadratic::new(a)?, point })
        };
        match kind {
            "quadratic" => quadratic(parse_matrix(s)?),
            "bowl" => quadratic(Array2::from_diag(&ndarray::arr1(&[2.0, 3.0]))),
            "saddle" => quadratic(Array2::from_diag(&ndarray::arr1(&[1.0, -1.0]))),
            "mlp" => {
                let spec = model_spec(s)?;
                let data = dataset_spec(s, &spec)?;
                let (train, _) = make_dataset(&data)?;
                let params = match s.raw("problem.checkpoint") {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading checkpoint {path}"), e))?;
                        let (store, hash) = ParamStore::from_text(&text)?;
                        if hash != spec.hash() {
                            return Err(s
                                .error("problem.checkpoint", format!("checkpoint was written for model {hash}, config describes {}", spec.hash()))
                                .into());
                        }
                        store.values.into_inner()
                    }
                    None => spec.clone().with_seed(init_seed(seed(s, seed_override)?)).init_params()?.values.into_inner(),
                };
                Ok(Self::Mlp { spec, batch: train, params })
            }
            other => Err(s.error("problem.kind", format!("unknown problem kind '{other}' (mlp | quadratic | bowl | saddle)")).into()),
        }
    }

    pub fn objective(&self) -> Result<Box<dyn Objective + '_>, CliError> {
        Ok(match self {
            Self::Quadratic { objective, .. } => Box::new(objective.clone()),
            Self::Mlp { spec, batch, .. } => Box::new(MlpLoss::new(spec, batch)?),
        })
    }

    pub fn point(&self) -> &[f64] {
        match self {
            Self::Quadratic { point, .. } => point,
            Self::Mlp { params, .. } => params,
        }
    }
}
