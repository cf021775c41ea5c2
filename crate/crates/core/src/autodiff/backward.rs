use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId, Op};
use crate::error::GraphError;
use crate::tensor::Tensor;

/// Gradient expressions produced by [`Graph::gradient`], one per requested
/// node, in request order.
#[derive(Clone, Debug)]
pub struct GradNodes {
    pairs: Vec<(NodeId, NodeId)>,
}

impl GradNodes {
    pub fn get(&self, wrt: NodeId) -> Option<NodeId> {
        self.pairs.iter().find(|(w, _)| *w == wrt).map(|(_, g)| *g)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.pairs.iter().map(|(_, g)| *g).collect()
    }

    pub fn pairs(&self) -> &[(NodeId, NodeId)] {
        &self.pairs
    }
}

/// Evaluated gradients keyed by the node they were taken with respect to.
pub type GradientMap = BTreeMap<NodeId, Tensor>;

impl Graph {
    /// Appends reverse-mode gradient expressions of the scalar `output` with
    /// respect to each node in `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes, so any scalar function of
    /// them can be differentiated again. Nodes that `output` does not depend
    /// on get a zero gradient.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<GradNodes, GraphError> {
        let out_shape = self.node(output)?.shape;
        if out_shape != [1, 1] {
            return Err(GraphError::NonScalarOutput {
                node: output.0,
                shape: out_shape,
            });
        }
        let mut uniq: Vec<NodeId> = Vec::new();
        for &w in wrt {
            self.node(w)?;
            if !uniq.contains(&w) {
                uniq.push(w);
            }
        }

        let limit = output.0 + 1;
        let mut depends = vec![false; limit];
        for &w in &uniq {
            if w.0 < limit {
                depends[w.0] = true;
            }
        }
        for i in 0..limit {
            if depends[i] {
                continue;
            }
            let node = &self.nodes[i];
            depends[i] = match node.op {
                Op::Detach(_) | Op::Input { .. } | Op::Constant(_) => false,
                _ => node.op.parents().iter().any(|p| depends[p.0]),
            };
        }
        let mut relevant = vec![false; limit];
        relevant[output.0] = depends[output.0];
        for i in (0..limit).rev() {
            if relevant[i] {
                for p in self.nodes[i].op.parents() {
                    if depends[p.0] {
                        relevant[p.0] = true;
                    }
                }
            }
        }

        let mut contribs: HashMap<usize, Vec<NodeId>> = HashMap::new();
        let mut adjoint: HashMap<usize, NodeId> = HashMap::new();
        if relevant[output.0] {
            let seed = self.constant(Tensor::scalar(1.0))?;
            contribs.insert(output.0, vec![seed]);
        }
        for i in (0..limit).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(parts) = contribs.remove(&i) else {
                continue;
            };
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = self.add(acc, p)?;
            }
            adjoint.insert(i, acc);
            let op = self.nodes[i].op.clone();
            for (parent, grad) in self.vjp(NodeId(i), &op, acc)? {
                if relevant[parent.0] {
                    contribs.entry(parent.0).or_default().push(grad);
                }
            }
        }

        let mut pairs = Vec::with_capacity(uniq.len());
        for w in uniq {
            let g = match adjoint.get(&w.0) {
                Some(&g) => g,
                None => {
                    let s = self.shape(w);
                    self.zeros(s)
                }
            };
            pairs.push((w, g));
        }
        Ok(GradNodes { pairs })
    }

    /// Sums a full-shape gradient down to the (broadcast) shape `target`.
    fn reduce_to(&mut self, g: NodeId, target: [usize; 2]) -> Result<NodeId, GraphError> {
        let s = self.shape(g);
        if s == target {
            return Ok(g);
        }
        if target == [1, 1] {
            return self.sum(g);
        }
        if target[0] == 1 {
            let ones = self.ones([1, s[0]]);
            return self.matmul(ones, g);
        }
        let ones = self.ones([s[1], 1]);
        self.matmul(g, ones)
    }

    /// `1 / sqrt(rowsum(x ⊙ x))` as an `[m,1]` column and the row-normalised `x`.
    fn normalize_rows(&mut self, x: NodeId) -> Result<(NodeId, NodeId), GraphError> {
        let [_, d] = self.shape(x);
        let sq = self.hadamard(x, x)?;
        let ones = self.ones([d, 1]);
        let sq_norm = self.matmul(sq, ones)?;
        let log_norm = self.log(sq_norm)?;
        let scaled = self.scale(log_norm, -0.5)?;
        let inv_norm = self.exp(scaled)?;
        let unit = self.hadamard(x, inv_norm)?;
        Ok((inv_norm, unit))
    }

    fn reciprocal_via_log(&mut self, log_x: NodeId) -> Result<NodeId, GraphError> {
        let neg = self.scale(log_x, -1.0)?;
        self.exp(neg)
    }

    fn vjp(&mut self, node: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>, GraphError> {
        Ok(match *op {
            Op::Input { .. } | Op::Constant(_) | Op::Detach(_) => Vec::new(),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let ga = if trans_a {
                    self.matmul_t(b, g, trans_b, true)?
                } else {
                    self.matmul_t(g, b, false, !trans_b)?
                };
                let gb = if trans_b {
                    self.matmul_t(g, a, true, trans_a)?
                } else {
                    self.matmul_t(a, g, !trans_a, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Add(a, b) => {
                let gb = self.reduce_to(g, self.shape(b))?;
                vec![(a, g), (b, gb)]
            }
            Op::Sub(a, b) => {
                let red = self.reduce_to(g, self.shape(b))?;
                let gb = self.scale(red, -1.0)?;
                vec![(a, g), (b, gb)]
            }
            Op::Scale(a, f) => vec![(a, self.scale(g, f)?)],
            Op::Hadamard(a, b) => {
                let ga = self.hadamard(g, b)?;
                let full = self.hadamard(g, a)?;
                let gb = self.reduce_to(full, self.shape(b))?;
                vec![(a, ga), (b, gb)]
            }
            Op::Concat { ref parts, axis } => {
                let total = self.shape(node)[axis];
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[axis];
                    let mut sel = Tensor::zeros(total, n);
                    for k in 0..n {
                        sel.data_mut()[(offset + k) * n + k] = 1.0;
                    }
                    let sel = self.constant(sel)?;
                    let gp = if axis == 1 {
                        self.matmul(g, sel)?
                    } else {
                        self.matmul_t(sel, g, true, false)?
                    };
                    out.push((p, gp));
                    offset += n;
                }
                out
            }
            Op::Sum(a) => {
                let ones = self.ones(self.shape(a));
                vec![(a, self.hadamard(ones, g)?)]
            }
            Op::Mean(a) => {
                let s = self.shape(a);
                let ones = self.ones(s);
                let gs = self.scale(g, 1.0 / (s[0] * s[1]) as f64)?;
                vec![(a, self.hadamard(ones, gs)?)]
            }
            Op::Sigmoid(a) => {
                let ones = self.ones(self.shape(a));
                let one_minus = self.sub(ones, node)?;
                let slope = self.hadamard(node, one_minus)?;
                vec![(a, self.hadamard(g, slope)?)]
            }
            Op::Tanh(a) => {
                let ones = self.ones(self.shape(a));
                let sq = self.hadamard(node, node)?;
                let slope = self.sub(ones, sq)?;
                vec![(a, self.hadamard(g, slope)?)]
            }
            Op::SmoothAbs(a) => {
                // d/dx sqrt(x² + ε) = x / sqrt(x² + ε)
                let log_y = self.log(node)?;
                let inv = self.reciprocal_via_log(log_y)?;
                let slope = self.hadamard(a, inv)?;
                vec![(a, self.hadamard(g, slope)?)]
            }
            Op::Exp(a) => vec![(a, self.hadamard(g, node)?)],
            Op::Log(a) => {
                let inv = self.reciprocal_via_log(node)?;
                vec![(a, self.hadamard(g, inv)?)]
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax ⊙ rowsum(g)
                let [_, c] = self.shape(a);
                let probs = self.exp(node)?;
                let ones = self.ones([c, 1]);
                let row_total = self.matmul(g, ones)?;
                let spread = self.hadamard(probs, row_total)?;
                vec![(a, self.sub(g, spread)?)]
            }
            Op::CosineSimilarity(a, b) => {
                let (inv_a, unit_a) = self.normalize_rows(a)?;
                let (inv_b, unit_b) = self.normalize_rows(b)?;
                let g_unit_a = self.matmul(g, unit_b)?;
                let g_unit_b = self.matmul_t(g, unit_a, true, false)?;
                let ga = self.unit_backward(g_unit_a, unit_a, inv_a)?;
                let gb = self.unit_backward(g_unit_b, unit_b, inv_b)?;
                vec![(a, ga), (b, gb)]
            }
        })
    }

    /// Backward of row normalisation `u = x / |x|`:
    /// `dx = (du - u ⊙ rowsum(du ⊙ u)) / |x|`.
    fn unit_backward(&mut self, g_unit: NodeId, unit: NodeId, inv_norm: NodeId) -> Result<NodeId, GraphError> {
        let [_, d] = self.shape(unit);
        let prod = self.hadamard(g_unit, unit)?;
        let ones = self.ones([d, 1]);
        let proj = self.matmul(prod, ones)?;
        let radial = self.hadamard(unit, proj)?;
        let tangent = self.sub(g_unit, radial)?;
        self.hadamard(tangent, inv_norm)
    }
}
