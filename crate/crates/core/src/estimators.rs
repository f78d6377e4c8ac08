//! Stochastic estimators of the Hessian trace.
//!
//! Both estimators average `σᵀHσ` over random probes `σ`, computing each
//! sample as `t = σᵀ·d(g·σ)/dω` on a retained gradient graph:
//!
//! * **SEHT-H** draws Rademacher probes over every regularized parameter.
//!   `E[σᵀHσ] = tr(H)`.
//! * **SEHT-D** first keeps each registry layer with probability `p1`, then
//!   draws `Q(p2)` probes (`±1` with probability `p2` each, `0` otherwise)
//!   over the kept layers only. For a fixed zero pattern the expectation is
//!   the partial trace over the nonzero slots; unconditionally it is
//!   `2·p2` times the kept-layer trace. `rescale_unbiased` divides each sample
//!   by `2·p2`.
//!
//! Unselected layers are left out of both derivation passes entirely.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp_nodes, quadratic_form_node, ExprGraph, HvpSession, NodeId, Objective, ParamLeaf, Recording};
use crate::error::{Error, Result};
use crate::params::LayerRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDistribution {
    Rademacher,
    /// `Pr(±1) = p` each, `Pr(0) = 1 − 2p`.
    Q(f64),
}

/// Entries in `{−1, 0, +1}` with an explicit zero mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVector {
    entries: Vec<i8>,
    zero_mask: Vec<bool>,
    distribution: ProbeDistribution,
}

impl ProbeVector {
    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    /// `true` where the entry is zero.
    pub fn zero_mask(&self) -> &[bool] {
        &self.zero_mask
    }

    pub fn distribution(&self) -> ProbeDistribution {
        self.distribution
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.zero_mask.iter().filter(|&&z| z).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&e| f64::from(e)).collect()
    }
}

/// One uniform draw per entry: `u < p → +1`, `u < 2p → −1`, else `0`.
/// With `p = ½` this consumes the stream exactly like [`sample_rademacher`].
fn draw_three_point<R: Rng + ?Sized>(rng: &mut R, p: f64) -> i8 {
    let u: f64 = rng.random();
    if u < p {
        1
    } else if u < 2.0 * p {
        -1
    } else {
        0
    }
}

pub fn sample_rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<ProbeVector> {
    if n == 0 {
        return Err(Error::Precondition("probe length must be at least 1".into()));
    }
    let entries: Vec<i8> = (0..n).map(|_| draw_three_point(rng, 0.5)).collect();
    Ok(ProbeVector { zero_mask: vec![false; n], entries, distribution: ProbeDistribution::Rademacher })
}

pub fn sample_q<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<ProbeVector> {
    if n == 0 {
        return Err(Error::Precondition("probe length must be at least 1".into()));
    }
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::Precondition(format!("Q(p) needs 0 < p <= 0.5, got {p}")));
    }
    let entries: Vec<i8> = (0..n).map(|_| draw_three_point(rng, p)).collect();
    let zero_mask = entries.iter().map(|&e| e == 0).collect();
    Ok(ProbeVector { entries, zero_mask, distribution: ProbeDistribution::Q(p) })
}

/// Keep each layer independently with probability `p1`. Returns layer indices.
pub fn select_layers<R: Rng + ?Sized>(registry: &LayerRegistry, p1: f64, rng: &mut R) -> Result<Vec<usize>> {
    if registry.is_empty() {
        return Err(Error::Precondition("empty layer registry".into()));
    }
    Ok((0..registry.len()).filter(|_| rng.random::<f64>() < p1).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    SehtH,
    SehtD,
}

impl std::str::FromStr for EstimatorMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seht_h" => Ok(Self::SehtH),
            "seht_d" => Ok(Self::SehtD),
            other => Err(format!("unknown estimator mode '{other}' (seht_h | seht_d)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub lambda: f64,
    pub max_iter: usize,
    /// Layer keep probability (SEHT-D).
    pub p1: f64,
    /// `Q(p)` parameter: each entry is `±1` with probability `p2`, so the
    /// per-entry selection rate is `2·p2`.
    pub p2: f64,
    pub rescale_unbiased: bool,
    /// Use the estimate as a constant in the training loss.
    pub detach_trace: bool,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::SehtH,
            lambda: 0.0,
            max_iter: 1,
            p1: 1.0,
            p2: 0.5,
            rescale_unbiased: false,
            detach_trace: false,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn seht_h(lambda: f64, max_iter: usize) -> Self {
        Self { lambda, max_iter, ..Self::default() }
    }

    /// SEHT-D with `p1 = p2 = prob`.
    pub fn seht_d(lambda: f64, max_iter: usize, prob: f64) -> Self {
        Self { mode: EstimatorMode::SehtD, lambda, max_iter, p1: prob, p2: prob, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if !(self.p1 > 0.0 && self.p1 <= 1.0) && !(self.p1 == 0.0 && self.mode == EstimatorMode::SehtD) {
            return Err(Error::Config(format!("p1 must be in (0, 1], got {}", self.p1)));
        }
        if !(self.p2 > 0.0 && self.p2 <= 0.5) {
            return Err(Error::Config(format!("p2 must be in (0, 0.5], got {}", self.p2)));
        }
        Ok(())
    }
}

/// Independent random streams for one estimator call.
///
/// Layer selection and probe entries draw from separate streams, so SEHT-D
/// with `p1 = 1, p2 = ½` sees exactly the probes SEHT-H would.
#[derive(Debug, Clone)]
pub struct EstimatorRng {
    pub selection: ChaCha8Rng,
    pub probes: ChaCha8Rng,
}

impl EstimatorRng {
    /// Streams keyed by `(seed, step)`.
    pub fn for_step(seed: u64, step: u64) -> Self {
        let mut selection = ChaCha8Rng::seed_from_u64(seed);
        selection.set_stream(step.wrapping_mul(2));
        let mut probes = ChaCha8Rng::seed_from_u64(seed);
        probes.set_stream(step.wrapping_mul(2).wrapping_add(1));
        Self { selection, probes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub sample_count: usize,
    /// Unbiased sample variance; 0 when fewer than two samples.
    pub sample_variance: f64,
    /// Fraction of all parameters eligible for probing in this call.
    pub selected_fraction: f64,
    /// Seconds.
    pub wall_time: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl TraceEstimate {
    fn from_samples(samples: Vec<f64>, selected_fraction: f64, wall_time: f64) -> Self {
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let k = samples.len();
        let sample_variance = if k > 1 { (m2 / (k - 1) as f64).max(0.0) } else { 0.0 };
        Self { mean, sample_count: k, sample_variance, selected_fraction, wall_time, samples }
    }

    pub fn standard_error(&self) -> f64 {
        if self.sample_count == 0 {
            0.0
        } else {
            (self.sample_variance / self.sample_count as f64).sqrt()
        }
    }
}

fn active_leaves(rec: &Recording, registry: &LayerRegistry, config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<Vec<ParamLeaf>> {
    let layers: Option<Vec<usize>> = match config.mode {
        EstimatorMode::SehtH => None,
        EstimatorMode::SehtD => Some(select_layers(registry, config.p1, &mut rng.selection)?),
    };
    Ok(rec
        .leaves
        .iter()
        .copied()
        .filter(|l| l.regularized && layers.as_ref().is_none_or(|sel| sel.contains(&l.layer)))
        .collect())
}

fn draw_direction(n: usize, leaves: &[ParamLeaf], config: &EstimatorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let count: usize = leaves.iter().map(|l| l.len).sum();
    let probe = match config.mode {
        EstimatorMode::SehtH => sample_rademacher(count, rng)?,
        EstimatorMode::SehtD => sample_q(count, config.p2, rng)?,
    };
    let mut dir = vec![0.0; n];
    let mut k = 0;
    for l in leaves {
        for slot in &mut dir[l.offset..l.offset + l.len] {
            *slot = f64::from(probe.entries[k]);
            k += 1;
        }
    }
    Ok(dir)
}

fn sample_scale(config: &EstimatorConfig) -> f64 {
    if config.mode == EstimatorMode::SehtD && config.rescale_unbiased {
        1.0 / (2.0 * config.p2)
    } else {
        1.0
    }
}

/// Result of [`trace_term`]: the in-graph trace node (absent when nothing
/// was selected) and the numeric estimate.
#[derive(Debug, Clone)]
pub struct TraceTerm {
    pub node: Option<NodeId>,
    pub estimate: TraceEstimate,
}

/// Append the stochastic trace estimate of `rec.loss` to its graph.
///
/// The returned node is `(1/maxIter)·Σₖ σₖᵀHσₖ` (times `1/(2·p2)` when
/// rescaling) and stays differentiable w.r.t. the parameters unless
/// `detach_trace` is set, in which case it is a constant.
pub fn trace_term(rec: &mut Recording, registry: &LayerRegistry, config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<TraceTerm> {
    config.validate()?;
    let start = Instant::now();
    let n = registry.total();
    let leaves = active_leaves(rec, registry, config, rng)?;
    let selected: usize = leaves.iter().map(|l| l.len).sum();
    let fraction = selected as f64 / n as f64;
    if leaves.is_empty() {
        let samples = vec![0.0; config.max_iter];
        let estimate = TraceEstimate::from_samples(samples, 0.0, start.elapsed().as_secs_f64());
        return Ok(TraceTerm { node: None, estimate });
    }

    let graph = &mut rec.graph;
    let nodes: Vec<NodeId> = leaves.iter().map(|l| l.node).collect();
    let grads = graph.gradient(rec.loss, &nodes)?;
    let scale = sample_scale(config);
    let mut samples = Vec::with_capacity(config.max_iter);
    let mut sum: Option<NodeId> = None;
    for _ in 0..config.max_iter {
        let dir = draw_direction(n, &leaves, config, &mut rng.probes)?;
        let (sig, h) = hvp_nodes(graph, &grads, &leaves, &dir)?;
        let t = quadratic_form_node(graph, &sig, &h);
        samples.push(scale * graph.scalar(t));
        sum = Some(match sum {
            None => t,
            Some(acc) => graph.add(acc, t),
        });
    }
    graph.check_finite()?;
    let avg = graph.scale(sum.expect("max_iter >= 1"), scale / config.max_iter as f64);
    let node = if config.detach_trace {
        let v = graph.value(avg).clone();
        graph.constant(v)
    } else {
        avg
    };
    let estimate = TraceEstimate::from_samples(samples, fraction, start.elapsed().as_secs_f64());
    Ok(TraceTerm { node: Some(node), estimate })
}

fn run_estimator<O: Objective + ?Sized>(obj: &O, params: &[f64], config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<TraceEstimate> {
    config.validate()?;
    let start = Instant::now();
    let rec = obj.record(params)?;
    let n = obj.num_params();
    let leaves = active_leaves(&rec, obj.registry(), config, rng)?;
    if leaves.is_empty() {
        return Ok(TraceEstimate::from_samples(vec![0.0; config.max_iter], 0.0, start.elapsed().as_secs_f64()));
    }
    let selected: usize = leaves.iter().map(|l| l.len).sum();
    let idx: Vec<usize> = leaves
        .iter()
        .map(|l| rec.leaves.iter().position(|r| r == l).expect("leaf from this recording"))
        .collect();
    drop(rec);
    let mut session = HvpSession::new(obj, params, Some(&idx))?;
    let scale = sample_scale(config);
    let mut samples = Vec::with_capacity(config.max_iter);
    for _ in 0..config.max_iter {
        let dir = draw_direction(n, &leaves, config, &mut rng.probes)?;
        samples.push(scale * session.quadratic_form(&dir)?);
    }
    Ok(TraceEstimate::from_samples(samples, selected as f64 / n as f64, start.elapsed().as_secs_f64()))
}

/// Hutchinson estimate over all regularized parameters.
pub fn seht_h<O: Objective + ?Sized>(obj: &O, params: &[f64], config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<TraceEstimate> {
    let config = EstimatorConfig { mode: EstimatorMode::SehtH, ..config.clone() };
    run_estimator(obj, params, &config, rng)
}

/// Layer-and-entry dropout estimate.
pub fn seht_d<O: Objective + ?Sized>(obj: &O, params: &[f64], config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<TraceEstimate> {
    let config = EstimatorConfig { mode: EstimatorMode::SehtD, ..config.clone() };
    run_estimator(obj, params, &config, rng)
}

/// Dispatch on `config.mode`.
pub fn estimate<O: Objective + ?Sized>(obj: &O, params: &[f64], config: &EstimatorConfig, rng: &mut EstimatorRng) -> Result<TraceEstimate> {
    run_estimator(obj, params, config, rng)
}

/// Size limit for oracles that need one HVP per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleGuard {
    pub limit: usize,
    pub override_limit: bool,
}

impl Default for OracleGuard {
    fn default() -> Self {
        Self { limit: 10_000, override_limit: false }
    }
}

impl OracleGuard {
    pub fn check(&self, n: usize) -> Result<()> {
        if n > self.limit && !self.override_limit {
            return Err(Error::SizeGuard { n, limit: self.limit });
        }
        Ok(())
    }
}

/// Run `f(session, i)` for every basis index, chunked across threads. Each
/// chunk owns its own recording; output order is the index order.
fn per_basis<O, T, F>(obj: &O, params: &[f64], f: F) -> Result<Vec<T>>
where
    O: Objective + ?Sized,
    T: Send,
    F: Fn(&mut HvpSession, &mut Vec<f64>, usize) -> Result<T> + Sync,
{
    let n = obj.num_params();
    let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Result<Vec<Vec<T>>> = starts
        .par_iter()
        .map(|&lo| {
            let mut session = HvpSession::new(obj, params, None)?;
            let mut e = vec![0.0; n];
            (lo..(lo + chunk).min(n))
                .map(|i| {
                    e[i] = 1.0;
                    let out = f(&mut session, &mut e, i);
                    e[i] = 0.0;
                    out
                })
                .collect()
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

/// `tr(H) = Σᵢ eᵢᵀHeᵢ` via one HVP per basis direction.
pub fn exact_trace<O: Objective + ?Sized>(obj: &O, params: &[f64], guard: OracleGuard) -> Result<f64> {
    guard.check(obj.num_params())?;
    obj.check_len(params)?;
    let diag = per_basis(obj, params, |s, e, i| Ok(s.hvp(e)?[i]))?;
    Ok(diag.iter().sum())
}

/// The full Hessian, assembled column by column from basis HVPs.
pub fn assemble_hessian<O: Objective + ?Sized>(obj: &O, params: &[f64], guard: OracleGuard) -> Result<Array2<f64>> {
    let n = obj.num_params();
    guard.check(n)?;
    obj.check_len(params)?;
    let cols = per_basis(obj, params, |s, e, _| s.hvp(e))?;
    Ok(Array2::from_shape_fn((n, n), |(r, c)| cols[c][r]))
}

/// Average of `σᵀHσ` over every sign pattern on the probed slots (`active[i]`
/// true) with zeros elsewhere. Exact; intended for small problems.
pub fn exhaustive_hutchinson<O: Objective + ?Sized>(obj: &O, params: &[f64], active: &[bool]) -> Result<TraceEstimate> {
    let n = obj.num_params();
    if active.len() != n {
        return Err(Error::Shape(format!("mask has {} entries, expected {n}", active.len())));
    }
    let slots: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    if slots.len() > 20 {
        return Err(Error::SizeGuard { n: slots.len(), limit: 20 });
    }
    let start = Instant::now();
    let mut session = HvpSession::new(obj, params, None)?;
    let mut samples = Vec::with_capacity(1 << slots.len());
    let mut dir = vec![0.0; n];
    for pattern in 0u64..(1u64 << slots.len()) {
        for (b, &i) in slots.iter().enumerate() {
            dir[i] = if pattern >> b & 1 == 0 { 1.0 } else { -1.0 };
        }
        samples.push(session.quadratic_form(&dir)?);
    }
    Ok(TraceEstimate::from_samples(samples, slots.len() as f64 / n as f64, start.elapsed().as_secs_f64()))
}

/// `Loss = ℓ_emp + λ·trace` on a shared graph. `λ = 0` returns `emp_loss`
/// itself.
pub fn regularized_loss(graph: &mut ExprGraph, emp_loss: NodeId, trace: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Precondition(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(emp_loss);
    }
    let scaled = graph.scale(trace, lambda);
    Ok(graph.add(emp_loss, scaled))
}
