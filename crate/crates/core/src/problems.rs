//! Fixture objectives: quadratics, linear and constant losses, and a
//! reference MLP problem.

use ndarray::{s, Array2};

use crate::autodiff::{ExprGraph, NodeId, Objective, ParamLeaf, Recording};
use crate::error::{Error, Result};
use crate::model::{Activation, Batch, MlpLoss, ModelSpec};
use crate::params::LayerRegistry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ℓ(ω) = ½ ωᵀAω`. The parameter vector may be split into several layers;
/// each layer is a separate leaf and `A` is applied block by block.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Array2<f64>,
    registry: LayerRegistry,
}

impl Quadratic {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::with_layers(a, &[n])
    }

    pub fn with_layers(a: Array2<f64>, layer_sizes: &[usize]) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(Error::Shape(format!("quadratic form needs a square matrix, got {:?}", a.dim())));
        }
        if layer_sizes.iter().sum::<usize>() != a.nrows() || layer_sizes.contains(&0) {
            return Err(Error::Shape("layer sizes must be positive and sum to the matrix size".into()));
        }
        let registry =
            LayerRegistry::from_lengths(layer_sizes.iter().enumerate().map(|(i, &n)| (format!("block{i}"), n)));
        Ok(Self { a, registry })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::new(Array2::from_diag(&ndarray::Array1::from(d.to_vec()))).expect("non-empty diagonal")
    }

    /// `½(ω₁² − ω₂²)`.
    pub fn saddle() -> Self {
        Self::diagonal(&[1.0, -1.0])
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a
    }
}

impl Objective for Quadratic {
    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn record(&self, params: &[f64]) -> Result<Recording> {
        self.check_len(params)?;
        let mut graph = ExprGraph::new();
        let entries = self.registry.entries();
        let leaves: Vec<ParamLeaf> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let v = Array2::from_shape_vec((e.len, 1), params[e.range()].to_vec()).expect("column");
                ParamLeaf { node: graph.param(v), offset: e.offset, len: e.len, layer: i, regularized: true }
            })
            .collect();
        let mut total: Option<NodeId> = None;
        for (i, ei) in entries.iter().enumerate() {
            let mut u: Option<NodeId> = None;
            for (j, ej) in entries.iter().enumerate() {
                let block = self.a.slice(s![ei.range(), ej.range()]).to_owned();
                let c = graph.constant(block);
                let p = graph.matmul(c, leaves[j].node);
                u = Some(match u {
                    None => p,
                    Some(acc) => graph.add(acc, p),
                });
            }
            let t = graph.inner(leaves[i].node, u.expect("at least one block"));
            total = Some(match total {
                None => t,
                Some(acc) => graph.add(acc, t),
            });
        }
        let loss = graph.scale(total.expect("at least one block"), 0.5);
        Ok(Recording { graph, loss, leaves })
    }
}

/// `ℓ(ω) = cᵀω`.
#[derive(Debug, Clone)]
pub struct Linear {
    c: Vec<f64>,
    registry: LayerRegistry,
}

impl Linear {
    pub fn new(c: Vec<f64>) -> Self {
        let registry = LayerRegistry::from_lengths([("linear", c.len())]);
        Self { c, registry }
    }
}

impl Objective for Linear {
    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn record(&self, params: &[f64]) -> Result<Recording> {
        self.check_len(params)?;
        let n = self.c.len();
        let mut graph = ExprGraph::new();
        let w = graph.param(Array2::from_shape_vec((n, 1), params.to_vec()).expect("column"));
        let c = graph.constant(Array2::from_shape_vec((n, 1), self.c.clone()).expect("column"));
        let loss = graph.inner(c, w);
        let leaves = vec![ParamLeaf { node: w, offset: 0, len: n, layer: 0, regularized: true }];
        Ok(Recording { graph, loss, leaves })
    }
}

/// A 16-12-10-12 tanh network (466 parameters) at its seeded
/// initialization on 512 uniform inputs with uniform random labels.
///
/// Its Hessian is diagonal-heavy enough that 10⁴ Rademacher probes give a
/// relative standard error near 0.4%.
#[derive(Debug, Clone)]
pub struct ReferenceMlp {
    pub spec: ModelSpec,
    pub batch: Batch,
    pub params: Vec<f64>,
}

impl ReferenceMlp {
    pub fn new(seed: u64) -> Self {
        let (input, classes, rows) = (16, 12, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::new(input, vec![12, 10], classes, Activation::Tanh).with_seed(seed);
        let x = Array2::from_shape_fn((rows, input), |_| rng.random_range(-1.5..1.5));
        let labels = (0..rows).map(|_| rng.random_range(1..=classes)).collect();
        let batch = Batch::new(x, labels, classes).expect("labels in range");
        let params = spec.init_params().expect("valid spec").values.into_inner();
        Self { spec, batch, params }
    }

    pub fn loss(&self) -> MlpLoss<'_> {
        MlpLoss::new(&self.spec, &self.batch).expect("nonempty batch")
    }
}

/// A loss that ignores its parameters.
#[derive(Debug, Clone)]
pub struct Constant {
    value: f64,
    registry: LayerRegistry,
}

impl Constant {
    pub fn new(value: f64, n: usize) -> Self {
        Self { value, registry: LayerRegistry::from_lengths([("unused", n)]) }
    }
}

impl Objective for Constant {
    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn record(&self, params: &[f64]) -> Result<Recording> {
        self.check_len(params)?;
        let n = params.len();
        let mut graph = ExprGraph::new();
        let w = graph.param(Array2::from_shape_vec((n, 1), params.to_vec()).expect("column"));
        let loss = graph.scalar_const(self.value);
        let leaves = vec![ParamLeaf { node: w, offset: 0, len: n, layer: 0, regularized: true }];
        Ok(Recording { graph, loss, leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn a2() -> Quadratic {
        Quadratic::new(array![[2.0, 1.0], [1.0, 3.0]]).unwrap()
    }

    #[test]
    fn quadratic_values() {
        let q = a2();
        assert_eq!(q.evaluate(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(q.evaluate(&[1.0, 1.0]).unwrap(), 3.5);
    }

    #[test]
    fn quadratic_gradient_and_hvp() {
        let q = a2();
        assert_eq!(q.gradient(&[1.0, 0.0]).unwrap().0, vec![2.0, 1.0]);
        assert_eq!(q.hvp(&[1.0, 0.0], &[1.0, 0.0]).unwrap().0, vec![2.0, 1.0]);
    }

    #[test]
    fn constant_and_linear_have_trivial_derivatives() {
        let c = Constant::new(3.0, 3);
        assert_eq!(c.evaluate(&[0.1, 0.2, 0.3]).unwrap(), 3.0);
        assert_eq!(c.gradient(&[0.1, 0.2, 0.3]).unwrap().0, vec![0.0; 3]);
        let l = Linear::new(vec![1.0, -2.0, 0.5]);
        assert_eq!(l.gradient(&[4.0, 5.0, 6.0]).unwrap().0, vec![1.0, -2.0, 0.5]);
        assert_eq!(l.hvp(&[4.0, 5.0, 6.0], &[1.0, -1.0, 1.0]).unwrap().0, vec![0.0; 3]);
    }

    #[test]
    fn blocked_quadratic_matches_single_block() {
        let a = array![[4.0, 1.0, -0.5], [1.0, 2.0, 0.3], [-0.5, 0.3, 1.0]];
        let one = Quadratic::new(a.clone()).unwrap();
        let two = Quadratic::with_layers(a, &[1, 2]).unwrap();
        let w = [0.3, -0.7, 1.1];
        let d = [1.0, -1.0, 1.0];
        assert!((one.evaluate(&w).unwrap() - two.evaluate(&w).unwrap()).abs() < 1e-14);
        let h1 = one.hvp(&w, &d).unwrap();
        let h2 = two.hvp(&w, &d).unwrap();
        for (x, y) in h1.iter().zip(h2.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_length_is_a_configuration_error() {
        assert!(matches!(a2().evaluate(&[1.0]), Err(Error::Config(_))));
    }
}
