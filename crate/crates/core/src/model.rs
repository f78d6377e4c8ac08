//! Multilayer perceptron classifiers with softmax cross-entropy.
//!
//! Labels are 1-based (`1..=classes`) everywhere in the public API.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ExprGraph, NodeId, Objective, ParamLeaf, Recording};
use crate::error::{Error, Result};
use crate::params::{FlatVector, LayerRegistry, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(format!("unknown activation '{other}' (relu | tanh | identity)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases uniform in `±1/√fan_in`.
    FanInUniform,
    /// Uniform in `±bound` for every parameter.
    Uniform(f64),
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: InitScheme,
    pub seed: u64,
    /// When false, bias entries are invisible to the trace regularizer.
    pub regularize_biases: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            classes,
            hidden,
            activation,
            init: InitScheme::FanInUniform,
            seed: 0,
            regularize_biases: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("model needs at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("all layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn registry(&self) -> LayerRegistry {
        let w = self.widths();
        LayerRegistry::from_lengths(w.windows(2).enumerate().map(|(i, p)| (format!("dense{i}"), p[0] * p[1] + p[1])))
    }

    pub fn num_params(&self) -> usize {
        self.registry().total()
    }

    /// Architecture fingerprint (ignores the seed and init scheme).
    pub fn hash(&self) -> String {
        let key = format!("{:?}|{:?}|{:?}", self.widths(), self.activation, self.regularize_biases);
        Sha256::digest(key.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut values = Vec::with_capacity(self.num_params());
        for pair in self.widths().windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = match self.init {
                InitScheme::FanInUniform => 1.0 / (fan_in as f64).sqrt(),
                InitScheme::Uniform(b) => b,
                InitScheme::Zeros => 0.0,
            };
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 });
            }
        }
        ParamStore::new(FlatVector(values), self.registry())
    }
}

/// Inputs (`n × N`) with 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} input rows but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y == 0 || y > classes) {
            return Err(Error::Config(format!("label {bad} outside 1..={classes}")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `n × M` one-hot targets.
    pub fn one_hot(&self, classes: usize) -> Array2<f64> {
        let mut y = Array2::zeros((self.len(), classes));
        for (i, &l) in self.labels.iter().enumerate() {
            y[[i, l - 1]] = 1.0;
        }
        y
    }
}

/// Record the network on `graph`; returns the logits node and the parameter leaves.
pub fn forward(spec: &ModelSpec, params: &[f64], inputs: &Array2<f64>, graph: &mut ExprGraph) -> Result<(NodeId, Vec<ParamLeaf>)> {
    spec.validate()?;
    if inputs.ncols() != spec.input_dim {
        return Err(Error::Config(format!("inputs have width {}, model expects {}", inputs.ncols(), spec.input_dim)));
    }
    if params.len() != spec.num_params() {
        return Err(Error::Config(format!("{} parameters supplied, model has {}", params.len(), spec.num_params())));
    }
    let widths = spec.widths();
    let last = widths.len() - 2;
    let mut h = graph.constant(inputs.clone());
    let mut leaves = Vec::with_capacity(2 * (last + 1));
    let mut offset = 0;
    for (i, pair) in widths.windows(2).enumerate() {
        let (fi, fo) = (pair[0], pair[1]);
        let w = Array2::from_shape_vec((fi, fo), params[offset..offset + fi * fo].to_vec()).expect("weight block");
        let w = graph.param(w);
        leaves.push(ParamLeaf { node: w, offset, len: fi * fo, layer: i, regularized: true });
        offset += fi * fo;
        let b = Array2::from_shape_vec((1, fo), params[offset..offset + fo].to_vec()).expect("bias block");
        let b = graph.param(b);
        leaves.push(ParamLeaf { node: b, offset, len: fo, layer: i, regularized: spec.regularize_biases });
        offset += fo;

        let z = graph.matmul(h, w);
        let z = graph.add_row(z, b);
        h = if i == last {
            z
        } else {
            match spec.activation {
                Activation::Relu => graph.relu(z),
                Activation::Tanh => graph.tanh(z),
                Activation::Identity => z,
            }
        };
    }
    Ok((h, leaves))
}

/// Mean softmax cross-entropy of `logits` against `onehot`, as a graph node.
pub fn cross_entropy_node(graph: &mut ExprGraph, logits: NodeId, onehot: &Array2<f64>) -> NodeId {
    let n = onehot.nrows() as f64;
    let y = graph.constant(onehot.clone());
    let lse = graph.logsumexp(logits);
    let zy = graph.mul(logits, y);
    let picked = graph.sum_cols(zy);
    let per = graph.sub(lse, picked);
    let total = graph.sum_all(per);
    graph.scale(total, 1.0 / n)
}

/// Numeric logits for a batch of inputs.
pub fn logits(spec: &ModelSpec, params: &[f64], inputs: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = ExprGraph::new();
    let (z, _) = forward(spec, params, inputs, &mut g)?;
    g.check_finite()?;
    Ok(g.value(z).clone())
}

/// Softmax of one logit row, max-shifted. Without the shift, logits beyond
/// about ±700 overflow `exp`.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `−log softmax(z)_y` for a 1-based label `y`.
pub fn cross_entropy(z: &[f64], y: usize) -> Result<f64> {
    if y == 0 || y > z.len() {
        return Err(Error::Precondition(format!("label {y} outside 1..={}", z.len())));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - z[y - 1])
}

/// 1-based argmax; ties go to the lowest index.
pub fn predict(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best + 1
}

/// Trace of the Hessian of cross-entropy w.r.t. the logits: `Σ pᵢ(1 − pᵢ)`.
/// Independent of the label.
///
/// Evaluated as `Σ eᵢ·(Σ_{j≠i} eⱼ) / S²` with shifted exponentials, so the
/// complement `1 − pᵢ` never cancels and uniform logits round only once.
pub fn output_hessian_trace(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let mut suffix = vec![0.0; e.len() + 1];
    for i in (0..e.len()).rev() {
        suffix[i] = suffix[i + 1] + e[i];
    }
    let total = suffix[0];
    let mut prefix = 0.0;
    let mut num = 0.0;
    for (i, &ei) in e.iter().enumerate() {
        num += ei * (prefix + suffix[i + 1]);
        prefix += ei;
    }
    num / (total * total)
}

/// A network bound to a batch, viewed as a loss over its parameters.
pub struct MlpLoss<'a> {
    spec: &'a ModelSpec,
    batch: &'a Batch,
    registry: LayerRegistry,
}

impl<'a> MlpLoss<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Result<Self> {
        spec.validate()?;
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        Ok(Self { spec, batch, registry: spec.registry() })
    }

    /// Record the loss and also hand back the logits node.
    pub fn record_with_logits(&self, params: &[f64]) -> Result<(Recording, NodeId)> {
        let mut graph = ExprGraph::new();
        let (z, leaves) = forward(self.spec, params, &self.batch.inputs, &mut graph)?;
        let loss = cross_entropy_node(&mut graph, z, &self.batch.one_hot(self.spec.classes));
        Ok((Recording { graph, loss, leaves }, z))
    }
}

impl Objective for MlpLoss<'_> {
    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn record(&self, params: &[f64]) -> Result<Recording> {
        self.record_with_logits(params).map(|(r, _)| r)
    }
}

/// Mean cross-entropy over the batch.
pub fn empirical_loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    MlpLoss::new(spec, batch)?.evaluate(params)
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let z = logits(spec, params, &batch.inputs)?;
    let hits = z
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &y)| predict(row.as_slice().expect("standard layout")) == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Measurable ingredients of the linear-model generalization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostics {
    /// Batch mean of `‖∂ℓ/∂z‖₂ = ‖softmax(z) − onehot(y)‖₂`.
    pub mu: f64,
    /// Batch mean of the output-space Hessian trace.
    pub v: f64,
}

pub fn bound_diagnostics(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<BoundDiagnostics> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let z = logits(spec, params, &batch.inputs)?;
    let (mut mu, mut v) = (0.0, 0.0);
    for (row, &y) in z.rows().into_iter().zip(&batch.labels) {
        let row = row.to_vec();
        let p = softmax(&row);
        let j2: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| {
                let d = pi - if i + 1 == y { 1.0 } else { 0.0 };
                d * d
            })
            .sum();
        mu += j2.sqrt();
        v += output_hessian_trace(&row);
    }
    let n = batch.len() as f64;
    Ok(BoundDiagnostics { mu: mu / n, v: v / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn eye_spec(n: usize) -> ModelSpec {
        let mut s = ModelSpec::new(n, vec![], n, Activation::Identity);
        s.init = InitScheme::Zeros;
        s
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = eye_spec(3);
        let p = spec.init_params().unwrap();
        let z = logits(&spec, &p.values, &array![[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(z, array![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn identity_weights_reproduce_input() {
        let spec = eye_spec(3);
        let mut p = spec.init_params().unwrap();
        for i in 0..3 {
            p.values[i * 3 + i] = 1.0;
        }
        let z = logits(&spec, &p.values, &array![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(z, array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn width_mismatch_is_a_configuration_error() {
        let spec = eye_spec(3);
        let p = spec.init_params().unwrap();
        assert!(matches!(logits(&spec, &p.values, &array![[1.0, 2.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn relu_net_matches_hand_rolled_forward() {
        let spec = ModelSpec::new(3, vec![5, 4], 3, Activation::Relu).with_seed(11);
        let p = spec.init_params().unwrap();
        let x = array![[0.2, -1.0, 0.7], [1.5, 0.3, -0.4]];
        let z = logits(&spec, &p.values, &x).unwrap();

        // straight-line reimplementation
        let w = spec.widths();
        let mut h: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut off = 0;
        for l in 0..w.len() - 1 {
            let (fi, fo) = (w[l], w[l + 1]);
            let wt = &p.values[off..off + fi * fo];
            let b = &p.values[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            h = h
                .iter()
                .map(|row| {
                    (0..fo)
                        .map(|j| {
                            let mut acc = b[j];
                            for i in 0..fi {
                                acc += row[i] * wt[i * fo + j];
                            }
                            if l + 2 < w.len() { acc.max(0.0) } else { acc }
                        })
                        .collect()
                })
                .collect();
        }
        for (r, row) in h.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((z[[r, c]] - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[0.0; 10], 4).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let mut z = [0.0; 10];
        z[2] = 100.0;
        assert!(cross_entropy(&z, 3).unwrap() <= 1e-10);
        let direct = -((3f64).exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 3).unwrap() - direct).abs() < 1e-14);
        assert!(cross_entropy(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.0, 5.0, 1.0]), 2);
        assert_eq!(predict(&[3.0, 3.0, 1.0]), 1);
    }

    #[test]
    fn output_trace_closed_form() {
        assert!((output_hessian_trace(&[0.0; 10]) - 0.9).abs() < 1e-15);
        assert!((output_hessian_trace(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(output_hessian_trace(&[200.0, 0.0, 0.0]) < 1e-80);
    }

    #[test]
    fn empirical_loss_is_the_batch_mean() {
        let spec = ModelSpec::new(2, vec![4], 3, Activation::Tanh).with_seed(3);
        let p = spec.init_params().unwrap();
        let x = array![[0.1, 0.2], [-1.0, 0.5], [0.3, 0.3], [2.0, -1.0], [0.0, 0.0], [1.0, 1.0], [-0.5, -0.5], [0.7, -0.2]];
        let labels = vec![1, 2, 3, 1, 2, 3, 1, 2];
        let batch = Batch::new(x.clone(), labels.clone(), 3).unwrap();
        let z = logits(&spec, &p.values, &x).unwrap();
        let mut sum = 0.0;
        for (r, &y) in z.rows().into_iter().zip(&labels) {
            sum += cross_entropy(&r.to_vec(), y).unwrap();
        }
        let l = empirical_loss(&spec, &p.values, &batch).unwrap();
        assert!((l - sum / 8.0).abs() <= 1e-12);

        let one = batch.select(&[1]);
        let two = batch.select(&[1, 1]);
        let l1 = empirical_loss(&spec, &p.values, &one).unwrap();
        assert!((l1 - cross_entropy(&z.row(1).to_vec(), 2).unwrap()).abs() < 1e-14);
        assert!((empirical_loss(&spec, &p.values, &two).unwrap() - l1).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let spec = ModelSpec::new(2, vec![], 2, Activation::Identity);
        let p = spec.init_params().unwrap();
        let empty = Batch::new(Array2::zeros((0, 2)), vec![], 2).unwrap();
        assert!(matches!(empirical_loss(&spec, &p.values, &empty), Err(Error::Precondition(_))));
        assert!(matches!(bound_diagnostics(&spec, &p.values, &empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn bound_diagnostics_at_uniform_logits() {
        let mut spec = ModelSpec::new(2, vec![], 10, Activation::Identity);
        spec.init = InitScheme::Zeros;
        let p = spec.init_params().unwrap();
        let batch = Batch::new(array![[1.0, 2.0], [-1.0, 0.0]], vec![3, 7], 10).unwrap();
        let d = bound_diagnostics(&spec, &p.values, &batch).unwrap();
        assert!((d.mu - (0.9f64).sqrt()).abs() < 1e-12);
        assert!((d.v - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_wrt_logits_is_softmax_minus_onehot() {
        let z0 = array![[0.3, -1.2, 2.0, 0.1]];
        let mut g = ExprGraph::new();
        let z = g.param(z0.clone());
        let y = array![[0.0, 0.0, 1.0, 0.0]];
        let l = cross_entropy_node(&mut g, z, &y);
        let gz = g.gradient(l, &[z]).unwrap()[0];
        let p = softmax(&z0.row(0).to_vec());
        for j in 0..4 {
            assert!((g.value(gz)[[0, j]] - (p[j] - y[[0, j]])).abs() < 1e-10);
        }
    }

    #[test]
    fn registry_and_hash() {
        let spec = ModelSpec::new(2, vec![3], 2, Activation::Relu);
        let r = spec.registry();
        assert_eq!(r.len(), 2);
        assert_eq!(r.entries()[0].len, 9);
        assert_eq!(r.entries()[1].len, 8);
        assert_eq!(spec.hash(), spec.clone().with_seed(99).hash());
        assert_ne!(spec.hash(), ModelSpec::new(2, vec![4], 2, Activation::Relu).hash());
    }

    proptest! {
        #[test]
        fn shift_invariance(z in proptest::collection::vec(-50.0f64..50.0, 2..12), c in -100.0f64..100.0, y in 0usize..12) {
            let y = y % z.len() + 1;
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            prop_assert_eq!(predict(&z), predict(&shifted));
            let a = cross_entropy(&z, y).unwrap();
            let b = cross_entropy(&shifted, y).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-10);
        }

        #[test]
        fn output_trace_bounds(z in proptest::collection::vec(-20.0f64..20.0, 2..12)) {
            let m = z.len() as f64;
            let t = output_hessian_trace(&z);
            prop_assert!(t > 0.0);
            prop_assert!(t <= 1.0 - 1.0 / m + 1e-15);
        }
    }
}
