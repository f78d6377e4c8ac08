use std::path::{Path, PathBuf};

use hessreg::dynamics::stability_report;
use hessreg::estimators::{estimate, exact_trace, exhaustive_hutchinson, EstimatorConfig, EstimatorMode, EstimatorRng};
use hessreg::harness::{
    benchmark, benchmark_csv, compare_experiment, epochs_csv, run_json, runs_csv, summary_csv, train, write_atomic, RunRecord, Variant,
};
use serde_json::{json, Value};

use crate::build::{self, Problem};
use crate::config::{ConfigError, ConfigFile, Settings};
use crate::error::CliError;

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub verbosity: u8,
}

impl Context {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes).map_err(|e| match e {
            hessreg::Error::Io(io) => CliError::io(format!("writing {}", path.display()), io),
            other => other.into(),
        })?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn prepare(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| {
            CliError::Config(ConfigError::new(format!("output directory {} is not writable: {e}", self.out_dir.display())))
        })
    }
}

pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(ConfigFile::parse(&text)?)
}

fn log_run(ctx: &Context, label: &str, record: &RunRecord) {
    if ctx.verbosity >= 1 {
        for e in &record.epochs {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            eprintln!(
                "[{label}] epoch {:>4}  objective {:.5}  train {}  heldout {}  acc {}/{}  reg {}",
                e.epoch,
                e.objective,
                fmt(e.train_loss),
                fmt(e.heldout_loss),
                fmt(e.train_accuracy),
                fmt(e.heldout_accuracy),
                fmt(e.regularizer),
            );
        }
    }
    if ctx.verbosity >= 2 {
        for (i, t) in record.step_times.iter().enumerate() {
            eprintln!("[{label}] step {i:>6}  {:.1} us", t * 1e6);
        }
    }
    if let Some(f) = &record.failure {
        eprintln!("[{label}] run flagged as failed at step {} (epoch {}): {}", f.step, f.epoch, f.message);
    }
}

pub fn run_train(ctx: &Context, file: &ConfigFile) -> Result<(), CliError> {
    let settings = file.single()?;
    let config = build::train_config(&settings, ctx.seed)?;
    config.validate()?;
    ctx.prepare()?;
    let record = train(&config)?;
    log_run(ctx, "train", &record);
    ctx.write("run.csv", &epochs_csv(&record)?)?;
    ctx.write_json("run.json", &run_json(&config, &record))?;
    ctx.write("params.txt", record.params.to_text(&record.spec_hash).as_bytes())?;
    Ok(())
}

fn variants(file: &ConfigFile, seed: Option<u64>) -> Result<(Vec<Variant>, Vec<Settings>), CliError> {
    let expanded = file.expand();
    let variants = expanded
        .iter()
        .map(|s| {
            let config = build::train_config(s, seed)?;
            config.validate()?;
            Ok(Variant::new(s.name.clone(), config))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((variants, expanded))
}

pub fn run_compare(ctx: &Context, file: &ConfigFile) -> Result<(), CliError> {
    let (variants, settings) = variants(file, ctx.seed)?;
    if variants.len() < 2 {
        return Err(ConfigError::new("compare needs at least two variants (declare variant.<name>.* keys or a grid)").into());
    }
    let seeds: usize = settings[0].get_or("compare.seeds", 5)?;
    ctx.prepare()?;
    let result = compare_experiment(&variants, seeds)?;
    for (name, record) in &result.runs {
        log_run(ctx, &format!("{name} seed {}", record.seed), record);
    }
    ctx.write("summary.csv", &summary_csv(&result.rows)?)?;
    ctx.write("runs.csv", &runs_csv(&result.runs)?)?;
    Ok(())
}

pub fn run_benchmark(ctx: &Context, file: &ConfigFile) -> Result<(), CliError> {
    let (variants, settings) = variants(file, ctx.seed)?;
    let steps: usize = settings[0].get_or("benchmark.steps", 20)?;
    let warmup: usize = settings[0].get_or("benchmark.warmup", 5)?;
    ctx.prepare()?;
    let rows = benchmark(&variants, steps, warmup)?;
    if ctx.verbosity >= 1 {
        for r in &rows {
            eprintln!("{:<24} {:>10.1} us/step  x{:.3}", r.variant, r.median_step_time * 1e6, r.ratio);
        }
    }
    ctx.write("benchmark.csv", &benchmark_csv(&rows)?)?;
    Ok(())
}

pub fn run_estimate_trace(ctx: &Context, file: &ConfigFile) -> Result<Value, CliError> {
    let settings = file.single()?;
    let seed = build::seed(&settings, ctx.seed)?;
    let problem = Problem::from_settings(&settings, ctx.seed)?;
    let config = build::estimator(&settings, seed, false)?.unwrap_or(EstimatorConfig { seed, ..EstimatorConfig::default() });
    config.validate()?;
    let exhaustive: bool = settings.get_or("estimate.exhaustive", false)?;
    let exact_mode = settings.raw("estimate.exact").unwrap_or("auto");
    if !matches!(exact_mode, "auto" | "true" | "false") {
        return Err(settings.error("estimate.exact", format!("expected auto | true | false, got '{exact_mode}'")).into());
    }
    let guard = build::oracle_guard(&settings)?;
    ctx.prepare()?;

    let objective = problem.objective()?;
    let point = problem.point();
    let n = objective.num_params();
    let est = if exhaustive {
        exhaustive_hutchinson(objective.as_ref(), point, &vec![true; n])?
    } else {
        estimate(objective.as_ref(), point, &config, &mut EstimatorRng::for_step(seed, 0))?
    };
    let want_exact = match exact_mode {
        "true" => true,
        "false" => false,
        _ => guard.check(n).is_ok(),
    };
    let exact = if want_exact { Some(exact_trace(objective.as_ref(), point, guard)?) } else { None };
    let relative_error = exact.filter(|&e| e != 0.0).map(|e| (est.mean - e).abs() / e.abs());
    let value = json!({
        "mode": match (exhaustive, config.mode) {
            (true, _) => "exhaustive",
            (false, EstimatorMode::SehtH) => "seht_h",
            (false, EstimatorMode::SehtD) => "seht_d",
        },
        "num_params": n,
        "mean": est.mean,
        "sample_count": est.sample_count,
        "sample_variance": est.sample_variance,
        "insufficient_samples": est.sample_count < 2,
        "standard_error": est.standard_error(),
        "selected_fraction": est.selected_fraction,
        "wall_time": est.wall_time,
        "exact": exact,
        "relative_error": relative_error,
    });
    ctx.write_json("trace_estimate.json", &value)?;
    Ok(value)
}

pub fn run_stability(ctx: &Context, file: &ConfigFile) -> Result<Value, CliError> {
    let settings = file.single()?;
    let problem = Problem::from_settings(&settings, ctx.seed)?;
    let guard = build::oracle_guard(&settings)?;
    ctx.prepare()?;
    let objective = problem.objective()?;
    let report = stability_report(objective.as_ref(), problem.point(), guard)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    ctx.write_json("stability.json", &value)?;
    Ok(value)
}
