use std::collections::HashMap;
use std::fmt;

use crate::error::GraphError;
use crate::tensor::Tensor;

/// Smoothing constant of `smooth_abs`: `|x| ≈ sqrt(x² + SMOOTH_ABS_EPS)`.
pub const SMOOTH_ABS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Closed set of primitive operations.
///
/// Binary elementwise ops (`Add`, `Sub`, `Hadamard`) accept a right operand
/// that is either the same shape as the left one, a `[1,1]` scalar, a `[1,n]`
/// row (broadcast down the rows) or an `[m,1]` column (broadcast across the
/// columns). `LogSoftmax` normalises each row. `CosineSimilarity` compares
/// every row of the left operand with every row of the right one.
#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String },
    Constant(Tensor),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SmoothAbs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogSoftmax(NodeId),
    CosineSimilarity(NodeId, NodeId),
    Detach(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Constant,
    MatMul,
    Add,
    Subtract,
    Scale,
    Hadamard,
    Concat,
    Sum,
    Mean,
    Sigmoid,
    Tanh,
    SmoothAbs,
    Exp,
    Log,
    LogSoftmax,
    CosineSimilarity,
    Detach,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Constant(_) => OpKind::Constant,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Subtract,
            Op::Scale(..) => OpKind::Scale,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::SmoothAbs(_) => OpKind::SmoothAbs,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::CosineSimilarity(..) => OpKind::CosineSimilarity,
            Op::Detach(_) => OpKind::Detach,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Input => "input",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Scale => "scale",
            OpKind::Hadamard => "hadamard",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::SmoothAbs => "smooth-abs",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::CosineSimilarity => "cosine-similarity",
            OpKind::Detach => "detach",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::CosineSimilarity(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::SmoothAbs(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::LogSoftmax(a)
            | Op::Detach(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: [usize; 2],
}

/// Append-only DAG of tensor expressions.
///
/// Nodes only refer to earlier nodes, so insertion order is a topological
/// order. [`Graph::gradient`](crate::autodiff::Graph::gradient) appends the
/// backward pass as ordinary nodes, which can be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    ones_cache: HashMap<[usize; 2], NodeId>,
}

/// Values bound to input nodes for one evaluation.
pub type Bindings = HashMap<NodeId, Tensor>;

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

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id.0))
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    fn push(&mut self, op: Op, shape: [usize; 2]) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<[usize; 2], GraphError> {
        self.node(id).map(|n| n.shape)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn input(&mut self, name: impl Into<String>, shape: [usize; 2]) -> Result<NodeId, GraphError> {
        if shape[0] == 0 || shape[1] == 0 {
            return Err(self.mismatch("input", format!("zero extent {shape:?}")));
        }
        Ok(self.push(Op::Input { name: name.into() }, shape))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        let (r, c) = value
            .dims2()
            .ok_or_else(|| self.mismatch("constant", format!("rank of {:?}", value.shape())))?;
        let value = if value.shape().len() == 1 {
            value.reshape(vec![r, c]).expect("row view")
        } else {
            value
        };
        Ok(self.push(Op::Constant(value), [r, c]))
    }

    /// Shared all-ones constant of the given shape.
    pub fn ones(&mut self, shape: [usize; 2]) -> NodeId {
        if let Some(&id) = self.ones_cache.get(&shape) {
            return id;
        }
        let id = self.push(Op::Constant(Tensor::ones(shape[0], shape[1])), shape);
        self.ones_cache.insert(shape, id);
        id
    }

    pub fn zeros(&mut self, shape: [usize; 2]) -> NodeId {
        self.push(Op::Constant(Tensor::zeros(shape[0], shape[1])), shape)
    }

    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId, GraphError> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(self.mismatch(
                "matmul",
                format!("{sa:?}{} x {sb:?}{}", tick(trans_a), tick(trans_b)),
            ));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            [m, n],
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_t(a, b, false, false)
    }

    fn broadcast_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<[usize; 2], GraphError> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        if broadcastable(sa, sb) {
            Ok(sa)
        } else {
            Err(self.mismatch(op, format!("{sa:?} with {sb:?}")))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.broadcast_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.broadcast_shape("subtract", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.broadcast_shape("hadamard", a, b)?;
        Ok(self.push(Op::Hadamard(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let s = self.check(a)?;
        Ok(self.push(Op::Scale(a, factor), s))
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        if parts.is_empty() || axis > 1 {
            return Err(self.mismatch("concat", format!("{} parts on axis {axis}", parts.len())));
        }
        let first = self.check(parts[0])?;
        let mut total = 0;
        for &p in parts {
            let s = self.check(p)?;
            if s[1 - axis] != first[1 - axis] {
                return Err(self.mismatch("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), [1, 1]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        Ok(self.push(Op::Mean(a), [1, 1]))
    }

    fn unary(&mut self, a: NodeId, make: fn(NodeId) -> Op) -> Result<NodeId, GraphError> {
        let s = self.check(a)?;
        Ok(self.push(make(a), s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Tanh)
    }

    pub fn smooth_abs(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::SmoothAbs)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Log)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::LogSoftmax)
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Detach)
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        if sa[1] != sb[1] {
            return Err(self.mismatch("cosine-similarity", format!("{sa:?} rows vs {sb:?} rows")));
        }
        Ok(self.push(Op::CosineSimilarity(a, b), [sa[0], sb[0]]))
    }

    /// Evaluates every node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Values, GraphError> {
        let all: Vec<NodeId> = (0..self.nodes.len()).map(NodeId).collect();
        self.evaluate(bindings, &all)
    }

    /// Evaluates `targets` and everything they depend on.
    pub fn evaluate(&self, bindings: &Bindings, targets: &[NodeId]) -> Result<Values, GraphError> {
        let mut needed = vec![false; self.nodes.len()];
        for &t in targets {
            self.node(t)?;
            needed[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    needed[p.0] = true;
                }
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = self.eval_node(i, node, bindings, &values)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values[i] = Some(value);
        }
        Ok(Values { values })
    }

    fn eval_node(
        &self,
        i: usize,
        node: &Node,
        bindings: &Bindings,
        values: &[Option<Tensor>],
    ) -> Result<Tensor, GraphError> {
        let v = |id: &NodeId| values[id.0].as_ref().expect("parent evaluated");
        let [rows, cols] = node.shape;
        Ok(match &node.op {
            Op::Input { name } => {
                let t = bindings.get(&NodeId(i)).ok_or_else(|| GraphError::UnboundInput {
                    node: i,
                    name: name.clone(),
                })?;
                if t.dims2() != Some((rows, cols)) {
                    return Err(GraphError::BindingShape {
                        node: i,
                        name: name.clone(),
                        expected: node.shape,
                        found: t.shape().to_vec(),
                    });
                }
                Tensor::matrix(rows, cols, t.data().to_vec())
            }
            Op::Constant(t) => t.clone(),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => matmul(v(a), v(b), *trans_a, *trans_b),
            Op::Add(a, b) => broadcast_zip(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(v(a), v(b), |x, y| x - y),
            Op::Hadamard(a, b) => broadcast_zip(v(a), v(b), |x, y| x * y),
            Op::Scale(a, f) => v(a).map(|x| x * f),
            Op::Concat { parts, axis } => concat(&parts.iter().map(v).collect::<Vec<_>>(), *axis, node.shape),
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => {
                let t = v(a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::SmoothAbs(a) => v(a).map(smooth_abs),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::LogSoftmax(a) => log_softmax_rows(v(a)),
            Op::CosineSimilarity(a, b) => {
                cosine_rows(v(a), v(b)).ok_or(GraphError::ZeroNorm { node: i })?
            }
            Op::Detach(a) => v(a).clone(),
        })
    }
}

fn tick(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

pub(crate) fn broadcastable(sa: [usize; 2], sb: [usize; 2]) -> bool {
    sb == sa || sb == [1, 1] || (sb[0] == 1 && sb[1] == sa[1]) || (sb[1] == 1 && sb[0] == sa[0])
}

/// Evaluated node values, indexed by [`NodeId`].
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Option<Tensor>>,
}

impl Values {
    /// Panics if `id` was not part of the evaluation.
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.try_get(id).expect("node was not evaluated")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.get(id).item()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_abs(x: f64) -> f64 {
    (x * x + SMOOTH_ABS_EPS).sqrt()
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = a.dims2().expect("rank 2");
    let (br, bc) = b.dims2().expect("rank 2");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += aip * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims2().expect("rank 2");
    let (br, bc) = b.dims2().expect("rank 2");
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let bv = match (br, bc) {
                (1, 1) => bd[0],
                (1, _) => bd[j],
                (_, 1) => bd[i],
                _ => bd[i * c + j],
            };
            out.push(f(ad[i * c + j], bv));
        }
    }
    Tensor::matrix(r, c, out)
}

fn concat(parts: &[&Tensor], axis: usize, shape: [usize; 2]) -> Tensor {
    let [rows, cols] = shape;
    let mut out = Vec::with_capacity(rows * cols);
    if axis == 0 {
        for p in parts {
            out.extend_from_slice(p.data());
        }
    } else {
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row_slice(i));
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("rank 2");
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::matrix(r, c, out)
}

/// Row-pairwise cosine similarity; `None` when some row has zero norm.
pub(crate) fn cosine_rows(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let norms = |t: &Tensor| -> Option<Vec<f64>> {
        (0..t.rows())
            .map(|i| {
                let n = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                (n > 0.0).then_some(n)
            })
            .collect()
    };
    let na = norms(a)?;
    let nb = norms(b)?;
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row_slice(i);
        for j in 0..n {
            let dot: f64 = ai.iter().zip(b.row_slice(j)).map(|(x, y)| x * y).sum();
            out.push(dot / (na[i] * nb[j]));
        }
    }
    Some(Tensor::matrix(m, n, out))
}
