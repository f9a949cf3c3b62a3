//! Reverse-mode differentiation over a dynamically built computation graph.
//!
//! A [`Graph`] is built define-by-run: every operation evaluates eagerly and
//! records itself, so the model code can branch on data availability while
//! the recorded topology stays replayable. [`Graph::forward`] re-evaluates the
//! recorded nodes from fresh leaf bindings, which is what
//! [`grad_check`] uses to perturb parameters.
//!
//! Leaves are either trainable parameters or inputs, both addressed by a
//! unique name. Constants are anonymous and keep their recorded value.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch at node #{node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node #{node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf name `{0}` registered twice")]
    DuplicateLeaf(String),
    #[error("no binding for leaf `{0}`")]
    MissingBinding(String),
    #[error("loss node #{node} is not scalar ({rows}x{cols})")]
    NonScalarLoss { node: usize, rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, trainable: bool },
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `rows x c` plus a broadcast `1 x c` row.
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    MeanAbs(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::MeanAbs(..) => "mean_abs",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, Var>,
}

/// Gradients of a scalar loss keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Current values of every node, indexed by [`Var::index`].
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    /// Trainable leaves in name order.
    pub fn parameters(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self
            .leaves
            .iter()
            .filter(|(_, v)| matches!(self.nodes[v.0].op, Op::Leaf { trainable: true, .. }))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        out.sort();
        out
    }

    fn add_leaf(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if self.leaves.contains_key(name) {
            return Err(DiffError::DuplicateLeaf(name.to_string()));
        }
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { node, op: "leaf" });
        }
        let v = Var(node);
        self.nodes.push(Node {
            op: Op::Leaf { name: name.to_string(), trainable },
            value,
            requires_grad: trainable,
        });
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers a trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.add_leaf(name, value, true)
    }

    /// Registers a named, non-trainable input leaf.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.add_leaf(name, value, false)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { node, op: "constant" });
        }
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        Ok(Var(node))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        let value = self.eval(node, &op)?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(node))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Slice(a, ..)
            | Op::MeanAbs(a)
            | Op::Sum(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }

    fn eval(&self, node: usize, op: &Op) -> Result<Tensor> {
        let name = op.name();
        let shape_err = |detail: String| DiffError::Shape { node, op: name, detail };
        let val = |v: &Var| &self.nodes[v.0].value;
        let same = |a: &Var, b: &Var| -> Result<()> {
            if val(a).same_shape(val(b)) {
                Ok(())
            } else {
                Err(shape_err(format!("{:?} vs {:?}", val(a).shape(), val(b).shape())))
            }
        };
        let out = match op {
            Op::Leaf { .. } | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                if val(a).cols() != val(b).rows() {
                    return Err(shape_err(format!("{:?} by {:?}", val(a).shape(), val(b).shape())));
                }
                val(a).matmul(val(b))
            }
            Op::Add(a, b) => {
                same(a, b)?;
                val(a).add(val(b))
            }
            Op::Sub(a, b) => {
                same(a, b)?;
                val(a).sub(val(b))
            }
            Op::Mul(a, b) => {
                same(a, b)?;
                val(a).zip_map(val(b), |x, y| x * y)
            }
            Op::AddRow(a, b) => {
                let (x, r) = (val(a), val(b));
                if r.rows() != 1 || r.cols() != x.cols() {
                    return Err(shape_err(format!("row {:?} onto {:?}", r.shape(), x.shape())));
                }
                let mut out = x.clone();
                let c = x.cols();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += r.data()[i % c];
                }
                out
            }
            Op::Scale(a, s) => val(a).scale(*s),
            Op::OneMinus(a) => val(a).map(|x| 1.0 - x),
            Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => val(a).map(sigmoid),
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Concat(vs) => {
                let Some(first) = vs.first() else {
                    return Err(shape_err("empty concatenation".into()));
                };
                let rows = val(first).rows();
                if let Some(bad) = vs.iter().find(|v| val(v).rows() != rows) {
                    return Err(shape_err(format!("row count {} vs {}", val(bad).rows(), rows)));
                }
                let cols: usize = vs.iter().map(|v| val(v).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in vs {
                        data.extend_from_slice(val(v).row(r));
                    }
                }
                Tensor::new(rows, cols, data).expect("concat shape")
            }
            Op::Slice(a, s, e) => {
                if s >= e || *e > val(a).cols() {
                    return Err(shape_err(format!("columns {s}..{e} of {:?}", val(a).shape())));
                }
                val(a).slice_cols(*s, *e)
            }
            Op::MeanAbs(a) => {
                let x = val(a);
                if x.is_empty() {
                    return Err(shape_err("mean of empty tensor".into()));
                }
                Tensor::scalar(x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
        };
        if !out.is_finite() {
            return Err(DiffError::NonFinite { node, op: name });
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::OneMinus(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice(a, start, end))
    }

    pub fn mean_abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanAbs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Affine layer `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Re-evaluates every node from new leaf bindings.
    ///
    /// All named leaves must be bound; constants keep their values.
    pub fn forward(&mut self, bindings: &HashMap<String, Tensor>) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            match &op {
                Op::Leaf { name, .. } => {
                    let v = bindings.get(name).ok_or_else(|| DiffError::MissingBinding(name.clone()))?;
                    if !v.same_shape(&self.nodes[i].value) {
                        return Err(DiffError::Shape {
                            node: i,
                            op: "leaf",
                            detail: format!("binding `{name}` has shape {:?}, expected {:?}", v.shape(), self.nodes[i].value.shape()),
                        });
                    }
                    if !v.is_finite() {
                        return Err(DiffError::NonFinite { node: i, op: "leaf" });
                    }
                    self.nodes[i].value = v.clone();
                }
                Op::Constant => {}
                _ => {
                    let value = self.eval(i, &op)?;
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(())
    }

    /// Current leaf values, suitable as bindings for [`Graph::forward`].
    pub fn bindings(&self) -> HashMap<String, Tensor> {
        self.leaves.iter().map(|(k, v)| (k.clone(), self.nodes[v.0].value.clone())).collect()
    }

    /// Gradient of the scalar `loss` with respect to every trainable leaf.
    ///
    /// Parameters the loss does not reach get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss { node: loss.0, rows: lv.rows(), cols: lv.cols() });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let send = |v: Var, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf { .. } => {
                    // keep the accumulated gradient for collection below
                    adj[i] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.matmul_t(val(*b)), &mut adj);
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, val(*a).t_matmul(&g), &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g.scale(-1.0), &mut adj);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y), &mut adj);
                    send(*b, g.zip_map(val(*a), |x, y| x * y), &mut adj);
                }
                Op::AddRow(a, b) => {
                    let c = g.cols();
                    let mut col = vec![0.0; c];
                    for (k, x) in g.data().iter().enumerate() {
                        col[k % c] += x;
                    }
                    send(*b, Tensor::row_vector(&col), &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s), &mut adj),
                Op::OneMinus(a) => send(*a, g.scale(-1.0), &mut adj),
                Op::Relu(a) => send(*a, g.zip_map(out, |x, y| if y > 0.0 { x } else { 0.0 }), &mut adj),
                Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, y| x * y * (1.0 - y)), &mut adj),
                Op::Tanh(a) => send(*a, g.zip_map(out, |x, y| x * (1.0 - y * y)), &mut adj),
                Op::Concat(vs) => {
                    let mut start = 0;
                    for v in vs {
                        let w = val(*v).cols();
                        send(*v, g.slice_cols(start, start + w), &mut adj);
                        start += w;
                    }
                }
                Op::Slice(a, s, e) => {
                    let src = val(*a);
                    let mut t = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (k, c) in (*s..*e).enumerate() {
                            t.set(r, c, g.get(r, k));
                        }
                    }
                    send(*a, t, &mut adj);
                }
                Op::MeanAbs(a) => {
                    let x = val(*a);
                    let s = g.item() / x.len() as f64;
                    send(*a, x.map(|v| if v > 0.0 { s } else if v < 0.0 { -s } else { 0.0 }), &mut adj);
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    send(*a, Tensor::filled(x.rows(), x.cols(), g.item()), &mut adj);
                }
            }
        }

        let mut grads = Gradients::new();
        for (name, v) in self.parameters() {
            let shape = self.nodes[v.0].value.shape();
            let g = if v.0 <= loss.0 { adj[v.0].take() } else { None };
            grads.insert(name, g.unwrap_or_else(|| Tensor::zeros(shape[0], shape[1])));
        }
        Ok(grads)
    }
}

/// Relative error `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between [`Graph::backward`] and central finite
/// differences over every entry of every trainable leaf.
///
/// `bindings` is the evaluation point; the graph is left evaluated there.
pub fn grad_check(graph: &mut Graph, bindings: &HashMap<String, Tensor>, loss: Var, epsilon: f64) -> Result<f64> {
    graph.forward(bindings)?;
    let analytic = graph.backward(loss)?;
    let mut point = bindings.clone();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for k in 0..grad.len() {
            let base = bindings[name].data()[k];
            point.get_mut(name).expect("bound").data_mut()[k] = base + epsilon;
            graph.forward(&point)?;
            let up = graph.value(loss).item();
            point.get_mut(name).expect("bound").data_mut()[k] = base - epsilon;
            graph.forward(&point)?;
            let down = graph.value(loss).item();
            point.get_mut(name).expect("bound").data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    graph.forward(bindings)?;
    Ok(worst)
}
