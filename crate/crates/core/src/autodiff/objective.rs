use ndarray::Array2;

use super::graph::{ExprGraph, NodeId};
use crate::error::{Error, Result};
use crate::params::{FlatVector, LayerRegistry};

/// A parameter tensor recorded as a leaf of the loss graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLeaf {
    pub node: NodeId,
    /// Position of the leaf's first entry in the flat vector (row-major).
    pub offset: usize,
    pub len: usize,
    /// Index into the objective's [`LayerRegistry`].
    pub layer: usize,
    /// Whether the trace regularizer may probe this leaf.
    pub regularized: bool,
}

/// A scalar loss recorded on a fresh graph at a given parameter point.
#[derive(Debug, Clone)]
pub struct Recording {
    pub graph: ExprGraph,
    pub loss: NodeId,
    pub leaves: Vec<ParamLeaf>,
}

impl Recording {
    pub fn loss_value(&self) -> f64 {
        self.graph.scalar(self.loss)
    }

    pub fn leaf_nodes(&self) -> Vec<NodeId> {
        self.leaves.iter().map(|l| l.node).collect()
    }

    /// Scatter per-leaf adjoint values into a flat vector of length `n`.
    pub fn flatten(&self, n: usize, leaves: &[ParamLeaf], nodes: &[NodeId]) -> FlatVector {
        let mut out = FlatVector::zeros(n);
        for (leaf, &node) in leaves.iter().zip(nodes) {
            let v = self.graph.value(node);
            for (dst, src) in out[leaf.offset..leaf.offset + leaf.len].iter_mut().zip(v.iter()) {
                *dst = *src;
            }
        }
        out
    }
}

/// A twice-differentiable scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn registry(&self) -> &LayerRegistry;

    /// Record the loss at `params` into a new graph.
    fn record(&self, params: &[f64]) -> Result<Recording>;

    fn num_params(&self) -> usize {
        self.registry().total()
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, objective expects {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    /// Loss value at `params`.
    fn evaluate(&self, params: &[f64]) -> Result<f64> {
        let rec = self.record(params)?;
        rec.graph.check_finite()?;
        Ok(rec.loss_value())
    }

    /// `∂ℓ/∂ω` at `params`.
    fn gradient(&self, params: &[f64]) -> Result<FlatVector> {
        let mut rec = self.record(params)?;
        rec.graph.check_finite()?;
        let nodes = rec.leaf_nodes();
        let grads = rec.graph.gradient(rec.loss, &nodes)?;
        rec.graph.check_finite()?;
        let leaves = rec.leaves.clone();
        Ok(rec.flatten(self.num_params(), &leaves, &grads))
    }

    /// `H·σ` at `params`, as the gradient of `g·σ`.
    fn hvp(&self, params: &[f64], direction: &[f64]) -> Result<FlatVector> {
        HvpSession::new(self, params, None)?.hvp(direction)
    }
}

/// Record `σ` restricted to one leaf as a constant shaped like the leaf.
pub fn probe_constant(graph: &mut ExprGraph, leaf: &ParamLeaf, direction: &[f64]) -> NodeId {
    let shape = graph.shape(leaf.node);
    let slice = direction[leaf.offset..leaf.offset + leaf.len].to_vec();
    let value = Array2::from_shape_vec(shape, slice).expect("leaf length matches its shape");
    graph.constant(value)
}

/// Given retained gradient nodes `grads` for `leaves`, append `v = g·σ` and
/// `h = dv/dω` to the graph. Returns `(σ constants, h nodes)`, one per leaf.
pub fn hvp_nodes(
    graph: &mut ExprGraph,
    grads: &[NodeId],
    leaves: &[ParamLeaf],
    direction: &[f64],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let sigmas: Vec<NodeId> = leaves.iter().map(|l| probe_constant(graph, l, direction)).collect();
    let mut v: Option<NodeId> = None;
    for (&g, &s) in grads.iter().zip(&sigmas) {
        let t = graph.inner(g, s);
        v = Some(match v {
            None => t,
            Some(acc) => graph.add(acc, t),
        });
    }
    let Some(v) = v else {
        return Ok((sigmas, Vec::new()));
    };
    let nodes: Vec<NodeId> = leaves.iter().map(|l| l.node).collect();
    let h = graph.gradient(v, &nodes)?;
    Ok((sigmas, h))
}

/// `σᵀh` as a scalar node.
pub fn quadratic_form_node(graph: &mut ExprGraph, sigmas: &[NodeId], h: &[NodeId]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (&s, &hv) in sigmas.iter().zip(h) {
        let t = graph.inner(s, hv);
        acc = Some(match acc {
            None => t,
            Some(a) => graph.add(a, t),
        });
    }
    acc.unwrap_or_else(|| graph.scalar_const(0.0))
}

/// A recorded loss whose first-order gradient graph is retained, so repeated
/// Hessian-vector products only pay for the second derivation.
pub struct HvpSession {
    rec: Recording,
    active: Vec<ParamLeaf>,
    grads: Vec<NodeId>,
    mark: usize,
    n: usize,
}

impl HvpSession {
    /// `active` restricts both derivation passes to a subset of the leaves
    /// (indices into the recording's leaf list); `None` means all leaves.
    pub fn new<O: Objective + ?Sized>(obj: &O, params: &[f64], active: Option<&[usize]>) -> Result<Self> {
        let mut rec = obj.record(params)?;
        rec.graph.check_finite()?;
        let active: Vec<ParamLeaf> = match active {
            Some(idx) => idx.iter().map(|&i| rec.leaves[i]).collect(),
            None => rec.leaves.clone(),
        };
        let nodes: Vec<NodeId> = active.iter().map(|l| l.node).collect();
        let grads = rec.graph.gradient(rec.loss, &nodes)?;
        rec.graph.check_finite()?;
        let mark = rec.graph.len();
        Ok(Self { rec, active, grads, mark, n: obj.num_params() })
    }

    pub fn loss_value(&self) -> f64 {
        self.rec.loss_value()
    }

    pub fn active_leaves(&self) -> &[ParamLeaf] {
        &self.active
    }

    /// Gradient restricted to the active leaves (zeros elsewhere).
    pub fn gradient(&self) -> FlatVector {
        self.rec.flatten(self.n, &self.active, &self.grads)
    }

    /// `H·σ` on the active block; inactive entries of the result are zero.
    pub fn hvp(&mut self, direction: &[f64]) -> Result<FlatVector> {
        self.check_direction(direction)?;
        let out = hvp_nodes(&mut self.rec.graph, &self.grads, &self.active, direction).and_then(|(_, h)| {
            self.rec.graph.check_finite()?;
            Ok(self.rec.flatten(self.n, &self.active, &h))
        });
        self.rec.graph.truncate(self.mark);
        out
    }

    /// `σᵀHσ` on the active block.
    pub fn quadratic_form(&mut self, direction: &[f64]) -> Result<f64> {
        self.check_direction(direction)?;
        let out = hvp_nodes(&mut self.rec.graph, &self.grads, &self.active, direction).and_then(|(s, h)| {
            let t = quadratic_form_node(&mut self.rec.graph, &s, &h);
            self.rec.graph.check_finite()?;
            Ok(self.rec.graph.scalar(t))
        });
        self.rec.graph.truncate(self.mark);
        out
    }

    fn check_direction(&self, direction: &[f64]) -> Result<()> {
        if direction.len() != self.n {
            return Err(Error::Shape(format!(
                "direction has {} entries, expected {}",
                direction.len(),
                self.n
            )));
        }
        Ok(())
    }
}
