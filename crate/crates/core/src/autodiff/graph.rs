//! Define-by-run expression graph over dense `f64` matrices.
//!
//! Every node stores its value at construction time, so the graph doubles as a
//! tape. [`ExprGraph::gradient`] appends the reverse sweep *as new nodes*: the
//! returned adjoints are ordinary graph nodes and can be differentiated again.
//! That is the whole second-order story: a Hessian-vector product is the
//! gradient of `g · σ` with `σ` recorded as a constant.
//!
//! All values are two-dimensional; scalars are `1 × 1`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node in an [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    /// Differentiable leaf.
    Param,
    /// Leaf with no adjoint, ever.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    /// `(r × c) + (1 × c)` with the row broadcast down.
    AddRow(usize, usize),
    SumAll(usize),
    /// Column sums, `r × c -> 1 × c`.
    SumRows(usize),
    /// Row sums, `r × c -> r × 1`.
    SumCols(usize),
    BroadcastScalar(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    /// Indicator `x > 0`; derivative is zero almost everywhere.
    Step(usize),
    /// Row-wise softmax.
    Softmax(usize),
    /// Row-wise log-sum-exp, `r × c -> r × 1`.
    LogSumExp(usize),
    /// Externally computed value with no derivative rule.
    Opaque(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::SumAll(_) => "sum_all",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Opaque(_) => "opaque",
        }
    }

    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Param | Op::Const => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastScalar(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::Opaque(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Append-only computation record. Parents always precede children, so the
/// insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `len`. Handles above `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        if self.first_non_finite.is_some_and(|i| i >= len) {
            self.first_non_finite = None;
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "node #{} is not a scalar", id.0);
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Parent handles of a node, in operand order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0]
            .op
            .parents()
            .into_iter()
            .flatten()
            .map(NodeId)
            .collect()
    }

    /// Fails with the first node whose value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::NonFinite {
                node,
                op: self.nodes[node].op.name(),
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node { op, value });
        NodeId(idx)
    }

    fn val(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ (#{} vs #{})",
            a.0,
            b.0
        );
    }

    // --- leaves ---

    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Param, value)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Record a value computed outside the graph. Differentiating through it fails.
    pub fn opaque(&mut self, parent: NodeId, value: Array2<f64>) -> NodeId {
        self.push(Op::Opaque(parent.0), value)
    }

    // --- elementwise ---

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = self.val(a) + self.val(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = self.val(a) * self.val(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let v = self.val(a) / self.val(b);
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(|x| -x);
        self.push(Op::Neg(a.0), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.val(a).mapv(|x| c * x);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.val(a).mapv(|x| x + c);
        self.push(Op::AddScalar(a.0, c), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::ln);
        self.push(Op::Log(a.0), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a.0), v)
    }

    pub fn step(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Step(a.0), v)
    }

    // --- linear algebra and reductions ---

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).0,
            "matmul: inner dimensions differ (#{} vs #{})",
            a.0,
            b.0
        );
        let v = self.val(a).dot(self.val(b));
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).t().to_owned();
        self.push(Op::Transpose(a.0), v)
    }

    /// `a + 1·row`, broadcasting a `1 × c` row over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row must be 1 x {c}");
        let v = self.val(a) + self.val(row);
        self.push(Op::AddRow(a.0, row.0), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.val(a).sum());
        self.push(Op::SumAll(a.0), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a.0), v)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a.0), v)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let s = self.scalar(a);
        self.push(Op::BroadcastScalar(a.0), Array2::from_elem(shape, s))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let v = self.val(a).broadcast((rows, c)).expect("row broadcast").to_owned();
        self.push(Op::BroadcastRows(a.0), v)
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a single column");
        let v = self.val(a).broadcast((r, cols)).expect("column broadcast").to_owned();
        self.push(Op::BroadcastCols(a.0), v)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.val(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(Op::Softmax(a.0), v)
    }

    /// Row-wise `log Σ exp`, computed as `m + log Σ exp(x - m)`.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let src = self.val(a);
        let v = Array2::from_shape_fn((src.nrows(), 1), |(i, _)| {
            let row = src.row(i);
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
        });
        self.push(Op::LogSumExp(a.0), v)
    }

    /// `Σ a ⊙ b` as a scalar node.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    // --- differentiation ---

    /// Reverse sweep from the scalar `output`, recorded as new nodes.
    ///
    /// Returns one adjoint node per entry of `wrt`, each shaped like its leaf.
    /// Leaves that `output` does not depend on get an exact zero constant.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!(
                "gradient output #{} has shape {:?}, expected a scalar",
                output.0,
                self.shape(output)
            )));
        }
        for &w in wrt {
            if !self.is_param(w) {
                return Err(Error::Precondition(format!(
                    "#{} ({}) is not a parameter leaf",
                    w.0,
                    self.op_name(w)
                )));
            }
        }

        let end = output.0 + 1;
        let mut reach = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in 0..end {
            if reach[i] {
                continue;
            }
            let op = self.nodes[i].op;
            reach[i] = match op {
                Op::Param | Op::Const | Op::Step(_) => false,
                _ => op.parents().into_iter().flatten().any(|p| reach[p]),
            };
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        if reach[output.0] {
            adj[output.0] = Some(self.scalar_const(1.0));
        }
        for i in (0..end).rev() {
            if !reach[i] {
                continue;
            }
            if let Some(g) = adj[i] {
                self.backprop(i, g, &reach, &mut adj)?;
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w);
                    self.constant(Array2::zeros(shape))
                }
            })
            .collect())
    }

    /// Numeric gradient values. With `retain == false` the adjoint nodes are
    /// discarded after reading, so the graph is left as it was.
    pub fn gradient_values(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        retain: bool,
    ) -> Result<Vec<Array2<f64>>> {
        let mark = self.len();
        let grads = self.gradient(output, wrt)?;
        let out = grads.iter().map(|&g| self.value(g).clone()).collect();
        let finite = self.check_finite();
        if !retain {
            self.truncate(mark);
        }
        finite?;
        Ok(out)
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], reach: &[bool], p: usize, c: NodeId) {
        if !reach[p] {
            return;
        }
        adj[p] = Some(match adj[p] {
            None => c,
            Some(prev) => self.add(prev, c),
        });
    }

    fn backprop(
        &mut self,
        i: usize,
        g: NodeId,
        reach: &[bool],
        adj: &mut [Option<NodeId>],
    ) -> Result<()> {
        let y = NodeId(i);
        match self.nodes[i].op {
            Op::Param | Op::Const | Op::Step(_) => {}
            Op::Opaque(_) => {
                return Err(Error::Unsupported {
                    node: i,
                    op: "opaque",
                })
            }
            Op::Add(a, b) => {
                self.accumulate(adj, reach, a, g);
                self.accumulate(adj, reach, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, reach, a, g);
                if reach[b] {
                    let c = self.neg(g);
                    self.accumulate(adj, reach, b, c);
                }
            }
            Op::Mul(a, b) => {
                if reach[a] {
                    let c = self.mul(g, NodeId(b));
                    self.accumulate(adj, reach, a, c);
                }
                if reach[b] {
                    let c = self.mul(g, NodeId(a));
                    self.accumulate(adj, reach, b, c);
                }
            }
            Op::Div(a, b) => {
                if reach[a] {
                    let c = self.div(g, NodeId(b));
                    self.accumulate(adj, reach, a, c);
                }
                if reach[b] {
                    // d(a/b)/db = -y/b
                    let q = self.div(y, NodeId(b));
                    let m = self.mul(g, q);
                    let c = self.neg(m);
                    self.accumulate(adj, reach, b, c);
                }
            }
            Op::Neg(a) => {
                let c = self.neg(g);
                self.accumulate(adj, reach, a, c);
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, k);
                self.accumulate(adj, reach, a, c);
            }
            Op::AddScalar(a, _) => self.accumulate(adj, reach, a, g),
            Op::MatMul(a, b) => {
                if reach[a] {
                    let bt = self.transpose(NodeId(b));
                    let c = self.matmul(g, bt);
                    self.accumulate(adj, reach, a, c);
                }
                if reach[b] {
                    let at = self.transpose(NodeId(a));
                    let c = self.matmul(at, g);
                    self.accumulate(adj, reach, b, c);
                }
            }
            Op::Transpose(a) => {
                let c = self.transpose(g);
                self.accumulate(adj, reach, a, c);
            }
            Op::AddRow(a, b) => {
                self.accumulate(adj, reach, a, g);
                if reach[b] {
                    let c = self.sum_rows(g);
                    self.accumulate(adj, reach, b, c);
                }
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a].value.dim();
                let c = self.broadcast_scalar(g, shape);
                self.accumulate(adj, reach, a, c);
            }
            Op::SumRows(a) => {
                let rows = self.nodes[a].value.nrows();
                let c = self.broadcast_rows(g, rows);
                self.accumulate(adj, reach, a, c);
            }
            Op::SumCols(a) => {
                let cols = self.nodes[a].value.ncols();
                let c = self.broadcast_cols(g, cols);
                self.accumulate(adj, reach, a, c);
            }
            Op::BroadcastScalar(a) => {
                let c = self.sum_all(g);
                self.accumulate(adj, reach, a, c);
            }
            Op::BroadcastRows(a) => {
                let c = self.sum_rows(g);
                self.accumulate(adj, reach, a, c);
            }
            Op::BroadcastCols(a) => {
                let c = self.sum_cols(g);
                self.accumulate(adj, reach, a, c);
            }
            Op::Exp(a) => {
                let c = self.mul(g, y);
                self.accumulate(adj, reach, a, c);
            }
            Op::Log(a) => {
                let c = self.div(g, NodeId(a));
                self.accumulate(adj, reach, a, c);
            }
            Op::Tanh(a) => {
                let sq = self.mul(y, y);
                let nsq = self.neg(sq);
                let d = self.add_scalar(nsq, 1.0);
                let c = self.mul(g, d);
                self.accumulate(adj, reach, a, c);
            }
            Op::Relu(a) => {
                let mask = self.step(NodeId(a));
                let c = self.mul(g, mask);
                self.accumulate(adj, reach, a, c);
            }
            Op::Softmax(a) => {
                // J^T g = y ⊙ (g - rowsum(g ⊙ y))
                let cols = self.nodes[a].value.ncols();
                let gy = self.mul(g, y);
                let s = self.sum_cols(gy);
                let sb = self.broadcast_cols(s, cols);
                let d = self.sub(g, sb);
                let c = self.mul(y, d);
                self.accumulate(adj, reach, a, c);
            }
            Op::LogSumExp(a) => {
                let cols = self.nodes[a].value.ncols();
                let gb = self.broadcast_cols(g, cols);
                let p = self.softmax(NodeId(a));
                let c = self.mul(gb, p);
                self.accumulate(adj, reach, a, c);
            }
        }
        Ok(())
    }
}
