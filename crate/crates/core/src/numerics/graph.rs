//! Tape-recorded computation graph with eager forward evaluation.
//!
//! Every builder method computes its output immediately and appends a node;
//! node ids are therefore already in topological order and `backward` is a
//! single reverse sweep over the tape.

use super::params::{ParamId, ParamStore};
use super::{GraphError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds reachable through [`Graph::build_primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Multiply,
    Negate,
    Exponent,
    Logarithm,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    ReduceSum,
    ReduceMean,
    Broadcast,
    Concat,
    Slice,
    Grl,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 16] = [
        PrimitiveKind::MatMul,
        PrimitiveKind::Add,
        PrimitiveKind::Multiply,
        PrimitiveKind::Negate,
        PrimitiveKind::Exponent,
        PrimitiveKind::Logarithm,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::Tanh,
        PrimitiveKind::Relu,
        PrimitiveKind::Softplus,
        PrimitiveKind::ReduceSum,
        PrimitiveKind::ReduceMean,
        PrimitiveKind::Broadcast,
        PrimitiveKind::Concat,
        PrimitiveKind::Slice,
        PrimitiveKind::Grl,
    ];
}

/// Extra arguments for primitives that need them.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveArgs {
    None,
    Axis(Option<usize>),
    Shape(Vec<usize>),
    Range { axis: usize, start: usize, end: usize },
    Alpha(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul,
    Add,
    Multiply,
    Negate,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    ReduceSum(Option<usize>),
    ReduceMean(Option<usize>),
    Broadcast,
    Concat(usize),
    Slice { axis: usize, start: usize },
    GatherRows(Vec<usize>),
    Grl(f64),
    Affine { scale: f64 },
    LogSigmoid { floor: f64 },
    ClampMin(f64),
    LogSoftmax,
    Pick(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Multiply => "multiply",
            Op::Negate => "negate",
            Op::Exp => "exponent",
            Op::Log => "logarithm",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::ReduceSum(_) => "reduce_sum",
            Op::ReduceMean(_) => "reduce_mean",
            Op::Broadcast => "broadcast",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(_) => "gather_rows",
            Op::Grl(_) => "grl",
            Op::Affine { .. } => "affine",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::ClampMin(_) => "clamp_min",
            Op::LogSoftmax => "log_softmax",
            Op::Pick(_) => "pick",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Activation applied by [`Graph::dense`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one gradient buffer per node (absent when the
/// node does not influence the loss).
#[derive(Debug, Clone)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a node, zeros when unreachable.
    pub fn wrt(&self, graph: &Graph, node: NodeId) -> Vec<f64> {
        self.node_grads[node.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; graph.value(node).len()])
    }

    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.node_grads[node.0].as_deref()
    }

    /// Writes `∂loss/∂param` into the grad slot of every parameter in the
    /// store; parameters that never entered the graph receive zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        store.zero_grads();
        self.accumulate_param_grads(store);
    }

    /// Adds this pass's parameter gradients onto the store's grad slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.param_nodes {
            if let Some(g) = &self.node_grads[node.0] {
                store.add_grad(pid, g);
            }
        }
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    softplus(x)
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

/// `out[r,c] = a[r,k] * b[k,c]`, accumulating into `out`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(GraphError::NonFinite {
                node: id.0,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(id)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, GraphError> {
        let src = &self.nodes[x.0].value;
        let values = src.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), values)?;
        self.push(op, vec![x], value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Constant leaf; gradients are still recorded for it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        let mut value = value;
        value.clear_grad();
        self.push(Op::Input, vec![], value)
    }

    /// Leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId, GraphError> {
        let mut value = store.value(id).clone();
        value.clear_grad();
        self.push(Op::Param(id), vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        matmul_into(self.value(a).values(), self.value(b).values(), &mut out, r, k, c);
        let value = Tensor::new(vec![r, c], out)?;
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), values)?;
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let nb = self.negate(b)?;
        self.add(a, nb)
    }

    pub fn multiply(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("multiply", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), values)?;
        self.push(Op::Multiply, vec![a, b], value)
    }

    pub fn negate(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Negate, x, |v| -v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Softplus, x, softplus)
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, GraphError> {
        self.unary(Op::Affine { scale }, x, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId, GraphError> {
        self.affine(x, scale, 0.0)
    }

    /// `ln σ(x)`, floored at `floor` (the gradient is zero where the floor binds).
    pub fn log_sigmoid(&mut self, x: NodeId, floor: f64) -> Result<NodeId, GraphError> {
        self.unary(Op::LogSigmoid { floor }, x, |v| (-softplus(-v)).max(floor))
    }

    /// `max(x, floor)`; gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId, GraphError> {
        self.unary(Op::ClampMin(floor), x, |v| v.max(floor))
    }

    /// Row-wise log-softmax of a `[n, k]` matrix.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let src = self.value(x);
        let (r, c) = as_2d(src.shape());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src.values()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax, vec![x], value)
    }

    /// Picks one column per row: `[n, k] -> [n, 1]`.
    pub fn pick(&mut self, x: NodeId, columns: &[usize]) -> Result<NodeId, GraphError> {
        let src = self.value(x);
        let (r, c) = as_2d(src.shape());
        if columns.len() != r || columns.iter().any(|&j| j >= c) {
            return Err(GraphError::IndexOutOfRange {
                op: "pick",
                shape: src.shape().to_vec(),
            });
        }
        let out = columns
            .iter()
            .enumerate()
            .map(|(i, &j)| src.values()[i * c + j])
            .collect();
        let value = Tensor::new(vec![r, 1], out)?;
        self.push(Op::Pick(columns.to_vec()), vec![x], value)
    }

    /// Sum over all elements (`axis = None`) or along one axis of a matrix.
    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        let value = self.reduce(x, axis, false)?;
        self.push(Op::ReduceSum(axis), vec![x], value)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        let value = self.reduce(x, axis, true)?;
        self.push(Op::ReduceMean(axis), vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.reduce_sum(x, None)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.reduce_mean(x, None)
    }

    fn reduce(&self, x: NodeId, axis: Option<usize>, mean: bool) -> Result<Tensor, GraphError> {
        let src = self.value(x);
        match axis {
            None => {
                let s: f64 = src.values().iter().sum();
                let n = src.len() as f64;
                Ok(Tensor::scalar(if mean { s / n } else { s }))
            }
            Some(ax) => {
                if src.shape().len() != 2 || ax > 1 {
                    return Err(GraphError::BadAxis {
                        op: "reduce",
                        axis: ax,
                        shape: src.shape().to_vec(),
                    });
                }
                let (r, c) = (src.shape()[0], src.shape()[1]);
                if ax == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(src.row(i)) {
                            *o += v;
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|o| *o /= r as f64);
                    }
                    Tensor::new(vec![c], out)
                } else {
                    let out = (0..r)
                        .map(|i| {
                            let s: f64 = src.row(i).iter().sum();
                            if mean {
                                s / c as f64
                            } else {
                                s
                            }
                        })
                        .collect();
                    Tensor::new(vec![r, 1], out)
                }
            }
        }
    }

    /// Expands a vector `[c]`, row `[1, c]`, column `[r, 1]` or scalar to `shape`.
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let src = self.value(x);
        let (ri, ci) = as_2d(src.shape());
        let (ro, co) = as_2d(shape);
        let ok_rows = ri == ro || ri == 1;
        let ok_cols = ci == co || ci == 1;
        if !ok_rows || !ok_cols || shape.is_empty() {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast",
                left: src.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(ro * co);
        for i in 0..ro {
            let si = if ri == 1 { 0 } else { i };
            for j in 0..co {
                let sj = if ci == 1 { 0 } else { j };
                out.push(src.values()[si * ci + sj]);
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(Op::Broadcast, vec![x], value)
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        let first = parts.first().ok_or(GraphError::EmptyInput { op: "concat" })?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(GraphError::BadAxis {
                op: "concat",
                axis,
                shape: s0,
            });
        }
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1 - axis] != s0[1 - axis] {
                return Err(GraphError::ShapeMismatch {
                    op: "concat",
                    left: s0,
                    right: s.to_vec(),
                });
            }
        }
        let value = if axis == 0 {
            let rows: usize = parts.iter().map(|p| self.shape(*p)[0]).sum();
            let mut out = Vec::with_capacity(rows * s0[1]);
            for p in parts {
                out.extend_from_slice(self.value(*p).values());
            }
            Tensor::new(vec![rows, s0[1]], out)?
        } else {
            let cols: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
            let r = s0[0];
            let mut out = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in parts {
                    out.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::new(vec![r, cols], out)?
        };
        self.push(Op::Concat(axis), parts.to_vec(), value)
    }

    /// Half-open slice `[start, end)` along `axis` of a matrix.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, GraphError> {
        let src = self.value(x);
        let s = src.shape().to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(GraphError::BadAxis { op: "slice", axis, shape: s });
        }
        if start >= end || end > s[axis] {
            return Err(GraphError::IndexOutOfRange { op: "slice", shape: s });
        }
        let value = if axis == 0 {
            Tensor::new(
                vec![end - start, s[1]],
                src.values()[start * s[1]..end * s[1]].to_vec(),
            )?
        } else {
            let mut out = Vec::with_capacity(s[0] * (end - start));
            for i in 0..s[0] {
                out.extend_from_slice(&src.row(i)[start..end]);
            }
            Tensor::new(vec![s[0], end - start], out)?
        };
        self.push(Op::Slice { axis, start }, vec![x], value)
    }

    /// Row gather: `out[i] = x[indices[i]]`.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, GraphError> {
        let src = self.value(x);
        if src.shape().len() != 2 || indices.iter().any(|&i| i >= src.shape()[0]) {
            return Err(GraphError::IndexOutOfRange {
                op: "gather_rows",
                shape: src.shape().to_vec(),
            });
        }
        let value = src.select_rows(indices);
        self.push(Op::GatherRows(indices.to_vec()), vec![x], value)
    }

    /// Gradient reversal: identity forward, upstream gradient times `-alpha` backward.
    pub fn grl(&mut self, x: NodeId, alpha: f64) -> Result<NodeId, GraphError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(GraphError::InvalidArgument {
                op: "grl",
                detail: format!("alpha must be finite and >= 0, got {alpha}"),
            });
        }
        let value = self.value(x).clone();
        self.push(Op::Grl(alpha), vec![x], value)
    }

    /// `activation(input · weights + bias)` with `weights: [in, out]`, `bias: [out]`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        activation: Activation,
    ) -> Result<NodeId, GraphError> {
        let out_dim = self.shape(weights).get(1).copied().unwrap_or(0);
        if self.shape(bias) != [out_dim] {
            return Err(GraphError::ShapeMismatch {
                op: "dense",
                left: self.shape(weights).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let lin = self.matmul(input, weights)?;
        let shape = self.shape(lin).to_vec();
        let b = self.broadcast(bias, &shape)?;
        let pre = self.add(lin, b)?;
        self.activate(pre, activation)
    }

    pub fn activate(&mut self, x: NodeId, activation: Activation) -> Result<NodeId, GraphError> {
        match activation {
            Activation::Identity => Ok(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
            Activation::Softplus => self.softplus(x),
        }
    }

    /// Uniform entry point over the primitive kinds.
    pub fn build_primitive(
        &mut self,
        kind: PrimitiveKind,
        inputs: &[NodeId],
        args: PrimitiveArgs,
    ) -> Result<NodeId, GraphError> {
        let need = |n: usize| -> Result<(), GraphError> {
            if inputs.len() != n {
                Err(GraphError::Arity {
                    op: "build_primitive",
                    expected: n,
                    got: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match (kind, args) {
            (PrimitiveKind::MatMul, _) => need(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            (PrimitiveKind::Add, _) => need(2).and_then(|_| self.add(inputs[0], inputs[1])),
            (PrimitiveKind::Multiply, _) => need(2).and_then(|_| self.multiply(inputs[0], inputs[1])),
            (PrimitiveKind::Negate, _) => need(1).and_then(|_| self.negate(inputs[0])),
            (PrimitiveKind::Exponent, _) => need(1).and_then(|_| self.exp(inputs[0])),
            (PrimitiveKind::Logarithm, _) => need(1).and_then(|_| self.log(inputs[0])),
            (PrimitiveKind::Sigmoid, _) => need(1).and_then(|_| self.sigmoid(inputs[0])),
            (PrimitiveKind::Tanh, _) => need(1).and_then(|_| self.tanh(inputs[0])),
            (PrimitiveKind::Relu, _) => need(1).and_then(|_| self.relu(inputs[0])),
            (PrimitiveKind::Softplus, _) => need(1).and_then(|_| self.softplus(inputs[0])),
            (PrimitiveKind::ReduceSum, PrimitiveArgs::Axis(a)) => {
                need(1).and_then(|_| self.reduce_sum(inputs[0], a))
            }
            (PrimitiveKind::ReduceSum, _) => need(1).and_then(|_| self.reduce_sum(inputs[0], None)),
            (PrimitiveKind::ReduceMean, PrimitiveArgs::Axis(a)) => {
                need(1).and_then(|_| self.reduce_mean(inputs[0], a))
            }
            (PrimitiveKind::ReduceMean, _) => need(1).and_then(|_| self.reduce_mean(inputs[0], None)),
            (PrimitiveKind::Broadcast, PrimitiveArgs::Shape(s)) => {
                need(1).and_then(|_| self.broadcast(inputs[0], &s))
            }
            (PrimitiveKind::Concat, PrimitiveArgs::Axis(a)) => self.concat(inputs, a.unwrap_or(0)),
            (PrimitiveKind::Concat, _) => self.concat(inputs, 0),
            (PrimitiveKind::Slice, PrimitiveArgs::Range { axis, start, end }) => {
                need(1).and_then(|_| self.slice(inputs[0], axis, start, end))
            }
            (PrimitiveKind::Grl, PrimitiveArgs::Alpha(alpha)) => need(1).and_then(|_| self.grl(inputs[0], alpha)),
            (PrimitiveKind::Grl, _) => need(1).and_then(|_| self.grl(inputs[0], 1.0)),
            (kind, args) => Err(GraphError::InvalidArgument {
                op: "build_primitive",
                detail: format!("{kind:?} requires arguments, got {args:?}"),
            }),
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(GraphError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_nodes = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                param_nodes.push((NodeId(idx), pid));
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            node_grads: grads,
            param_nodes,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
            f(grads[id.0].as_mut().expect("gradient slot initialised"))
        }
        let zeros_for = |grads: &mut [Option<Vec<f64>>], id: NodeId| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.len()]);
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                zeros_for(grads, a);
                acc(grads, a, |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let brow = &bv.values()[p * c..(p + 1) * c];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += s;
                        }
                    }
                });
                zeros_for(grads, b);
                acc(grads, b, |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..r {
                        let arow = &av.values()[i * k..(i + 1) * k];
                        let grow = &g[i * c..(i + 1) * c];
                        for (p, &a_ip) in arow.iter().enumerate() {
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add => {
                for &inp in &node.inputs {
                    zeros_for(grads, inp);
                    acc(grads, inp, |gi| gi.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                }
            }
            Op::Multiply => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a).values(), self.value(b).values());
                zeros_for(grads, a);
                acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                zeros_for(grads, b);
                acc(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Negate => self.elementwise(node, g, grads, |_, _| -1.0),
            Op::Exp => self.elementwise(node, g, grads, |_, y| y),
            Op::Log => self.elementwise(node, g, grads, |x, _| 1.0 / x),
            Op::Sigmoid => self.elementwise(node, g, grads, |_, y| y * (1.0 - y)),
            Op::Tanh => self.elementwise(node, g, grads, |_, y| 1.0 - y * y),
            Op::Relu => self.elementwise(node, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus => self.elementwise(node, g, grads, |x, _| sigmoid(x)),
            Op::Affine { scale } => {
                let s = *scale;
                self.elementwise(node, g, grads, move |_, _| s)
            }
            Op::Grl(alpha) => {
                let a = *alpha;
                self.elementwise(node, g, grads, move |_, _| -a)
            }
            Op::LogSigmoid { floor } => {
                let f = *floor;
                self.elementwise(node, g, grads, move |x, _| if -softplus(-x) < f { 0.0 } else { sigmoid(-x) })
            }
            Op::ClampMin(floor) => {
                let f = *floor;
                self.elementwise(node, g, grads, move |x, _| if x < f { 0.0 } else { 1.0 })
            }
            Op::LogSoftmax => {
                let x = node.inputs[0];
                let (r, c) = as_2d(out.shape());
                zeros_for(grads, x);
                acc(grads, x, |gx| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let yrow = &out.values()[i * c..(i + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Pick(cols) => {
                let x = node.inputs[0];
                let c = self.value(x).cols();
                zeros_for(grads, x);
                acc(grads, x, |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::ReduceSum(axis) | Op::ReduceMean(axis) => {
                let mean = matches!(node.op, Op::ReduceMean(_));
                let x = node.inputs[0];
                let xs = self.value(x).shape().to_vec();
                zeros_for(grads, x);
                acc(grads, x, |gx| match axis {
                    None => {
                        let v = if mean { g[0] / gx.len() as f64 } else { g[0] };
                        gx.iter_mut().for_each(|o| *o += v);
                    }
                    Some(0) => {
                        let (r, c) = (xs[0], xs[1]);
                        let d = if mean { r as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j] / d;
                            }
                        }
                    }
                    Some(_) => {
                        let (r, c) = (xs[0], xs[1]);
                        let d = if mean { c as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[i] / d;
                            }
                        }
                    }
                });
            }
            Op::Broadcast => {
                let x = node.inputs[0];
                let (ri, ci) = as_2d(self.value(x).shape());
                let (ro, co) = as_2d(out.shape());
                zeros_for(grads, x);
                acc(grads, x, |gx| {
                    for i in 0..ro {
                        let si = if ri == 1 { 0 } else { i };
                        for j in 0..co {
                            let sj = if ci == 1 { 0 } else { j };
                            gx[si * ci + sj] += g[i * co + j];
                        }
                    }
                });
            }
            Op::Concat(axis) => {
                let cols_out = out.shape()[1];
                let mut offset = 0;
                for &inp in &node.inputs {
                    let s = self.value(inp).shape().to_vec();
                    zeros_for(grads, inp);
                    if *axis == 0 {
                        let n = s[0] * s[1];
                        let start = offset;
                        acc(grads, inp, |gi| {
                            gi.iter_mut().zip(&g[start..start + n]).for_each(|(o, v)| *o += v)
                        });
                        offset += n;
                    } else {
                        let start = offset;
                        acc(grads, inp, |gi| {
                            for i in 0..s[0] {
                                for j in 0..s[1] {
                                    gi[i * s[1] + j] += g[i * cols_out + start + j];
                                }
                            }
                        });
                        offset += s[1];
                    }
                }
            }
            Op::Slice { axis, start } => {
                let x = node.inputs[0];
                let s = self.value(x).shape().to_vec();
                let os = out.shape().to_vec();
                zeros_for(grads, x);
                acc(grads, x, |gx| {
                    if *axis == 0 {
                        let base = start * s[1];
                        gx[base..base + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
                    } else {
                        for i in 0..os[0] {
                            for j in 0..os[1] {
                                gx[i * s[1] + start + j] += g[i * os[1] + j];
                            }
                        }
                    }
                });
            }
            Op::GatherRows(indices) => {
                let x = node.inputs[0];
                let c = self.value(x).cols();
                zeros_for(grads, x);
                acc(grads, x, |gx| {
                    for (i, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[i * c + j];
                        }
                    }
                });
            }
        }
    }

    /// Unary backward where `d out / d in = deriv(x, y)` elementwise.
    fn elementwise(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let x = node.inputs[0];
        let xv = self.value(x).values();
        let yv = node.value.values();
        let slot = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
        for i in 0..g.len() {
            slot[i] += g[i] * deriv(xv[i], yv[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1., 2.])).unwrap();
        let b = g.input(Tensor::vector(vec![3., 4.])).unwrap();
        let c = g.build_primitive(PrimitiveKind::Add, &[a, b], PrimitiveArgs::None).unwrap();
        assert_eq!(g.value(c).values(), &[4., 6.]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.input(mat(2, 2, &[1., 0., 0., 1.])).unwrap();
        let m = g.input(mat(2, 2, &[1., 2., 3., 4.])).unwrap();
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).values(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn sigmoid_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.input(mat(2, 3, &[0.; 6])).unwrap();
        let b = g.input(mat(2, 3, &[0.; 6])).unwrap();
        match g.matmul(a, b) {
            Err(GraphError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected_with_node_id() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        match g.log(x) {
            Err(GraphError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "logarithm");
            }
            other => panic!("expected non-finite, got {other:?}"),
        }
    }

    #[test]
    fn backward_linear_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1., 2., 3.])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![1., 1., 1.]);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1., 2.])).unwrap();
        let sq = g.multiply(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1., 2.])).unwrap();
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn unreachable_nodes_get_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1., 2.])).unwrap();
        let y = g.input(Tensor::vector(vec![5., 6.])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, y), vec![0., 0.]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.input(mat(1, 2, &[1., 0.])).unwrap();
        let w = g.input(mat(2, 2, &[1., 0., 0., 1.])).unwrap();
        let b = g.input(Tensor::vector(vec![0., 0.])).unwrap();
        let y = g.dense(x, w, b, Activation::Identity).unwrap();
        assert_eq!(g.value(y).values(), &[1., 0.]);

        let x = g.input(mat(1, 2, &[1., 1.])).unwrap();
        let w = g.input(mat(2, 1, &[1., 1.])).unwrap();
        let b = g.input(Tensor::vector(vec![-2.])).unwrap();
        let y = g.dense(x, w, b, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(y).values(), &[0.5]);
    }

    #[test]
    fn dense_rejects_bad_bias() {
        let mut g = Graph::new();
        let x = g.input(mat(1, 2, &[1., 0.])).unwrap();
        let w = g.input(mat(2, 2, &[1., 0., 0., 1.])).unwrap();
        let b = g.input(Tensor::vector(vec![0., 0., 0.])).unwrap();
        assert!(g.dense(x, w, b, Activation::Identity).is_err());
    }

    #[test]
    fn grl_forward_identity_backward_reversed() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1., 2., 3.])).unwrap();
        let y = g.grl(x, 0.5).unwrap();
        assert_eq!(g.value(y).values(), &[1., 2., 3.]);

        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![4., 5.])).unwrap();
        let y = g.grl(x, 1.0).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![-1., -1.]);

        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![4., 5.])).unwrap();
        let y = g.grl(x, 0.0).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(&g, x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grl_rejects_negative_alpha() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.])).unwrap();
        assert!(g.grl(x, -0.1).is_err());
    }

    #[test]
    fn log_softmax_rows_normalised() {
        let mut g = Graph::new();
        let x = g.input(mat(2, 3, &[1., 2., 3., 0., 0., 0.])).unwrap();
        let y = g.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
