//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Every node stores the operation
//! that produced it, the ids of its inputs (always earlier nodes), and its
//! value. [`Tape::backward`] walks the list once in reverse and accumulates
//! vector-Jacobian products in a fixed order, so gradients are
//! bit-reproducible for a given sequence of recorded operations.

use super::tensor::{matmul_acc, Tensor};
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// A value entered from outside (parameter, input or constant).
    Leaf,
    /// Elementwise sum. The right operand may broadcast (see below).
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Concatenation along `axis`.
    Concat {
        axis: usize,
    },
    /// Columns `start..end` of the last axis.
    Slice {
        start: usize,
        end: usize,
    },
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// Softmax along the last axis.
    Softmax,
    /// `x - logsumexp(x)` along the last axis.
    LogSoftmax,
    /// Row selection from a matrix; `None` yields a zero row.
    GatherRows(Vec<Option<usize>>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::MatMul => "matmul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale(_) => "scale",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::GatherRows(_) => "gather_rows",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Leaf => n == 0,
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => n == 2,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }

    /// Evaluate the operation on concrete values.
    pub fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        if !self.arity_ok(inputs.len()) {
            return Err(DiffError::Arity {
                op: self.name(),
                got: inputs.len(),
            });
        }
        let mismatch = || DiffError::ShapeMismatch {
            op: self.name(),
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        };
        match self {
            Op::Leaf => unreachable!("leaf nodes are not evaluated"),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let mode = Broadcast::of(a, b).ok_or_else(mismatch)?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let bd = b.data();
                let data = match mode {
                    Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                    Broadcast::Scalar => a.data().iter().map(|&x| f(x, bd[0])).collect(),
                    Broadcast::Row(cols) => a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % cols])).collect(),
                };
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch());
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                matmul_acc(a.data(), b.data(), &mut out, m, k, n);
                Tensor::new(vec![m, n], out)
            }
            Op::Concat { axis } => {
                let first = inputs[0];
                let rank = first.rank();
                if *axis >= rank {
                    return Err(mismatch());
                }
                for t in inputs {
                    if t.rank() != rank || (0..rank).any(|d| d != *axis && t.shape()[d] != first.shape()[d]) {
                        return Err(mismatch());
                    }
                }
                let outer: usize = first.shape()[..*axis].iter().product();
                let chunks: Vec<usize> = inputs.iter().map(|t| t.shape()[*axis..].iter().product()).collect();
                let total: usize = chunks.iter().sum();
                let mut data = Vec::with_capacity(outer * total);
                for o in 0..outer {
                    for (t, &c) in inputs.iter().zip(&chunks) {
                        data.extend_from_slice(&t.data()[o * c..(o + 1) * c]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
                Tensor::new(shape, data)
            }
            Op::Slice { start, end } => {
                let x = inputs[0];
                let cols = x.last_dim();
                if x.rank() == 0 || start >= end || *end > cols {
                    return Err(DiffError::BadSlice {
                        shape: x.shape().to_vec(),
                        start: *start,
                        end: *end,
                    });
                }
                let width = end - start;
                let mut data = Vec::with_capacity(x.outer() * width);
                for row in x.data().chunks(cols) {
                    data.extend_from_slice(&row[*start..*end]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = width;
                Tensor::new(shape, data)
            }
            Op::Tanh => Ok(inputs[0].map(f64::tanh)),
            Op::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Op::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Exp => Ok(inputs[0].map(f64::exp)),
            Op::Log => Ok(inputs[0].map(f64::ln)),
            Op::Sqrt => Ok(inputs[0].map(f64::sqrt)),
            Op::Square => Ok(inputs[0].map(|v| v * v)),
            Op::Scale(s) => Ok(inputs[0].map(|v| v * s)),
            Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Op::Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(mismatch());
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            Op::Softmax | Op::LogSoftmax => {
                let x = inputs[0];
                if x.rank() == 0 {
                    return Err(mismatch());
                }
                let cols = x.last_dim();
                let mut data = Vec::with_capacity(x.numel());
                for row in x.data().chunks(cols) {
                    let lse = log_sum_exp(row);
                    if *self == Op::Softmax {
                        data.extend(row.iter().map(|v| (v - lse).exp()));
                    } else {
                        data.extend(row.iter().map(|v| v - lse));
                    }
                }
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::GatherRows(idx) => {
                let x = inputs[0];
                if x.rank() != 2 {
                    return Err(mismatch());
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(idx.len() * cols);
                for r in idx {
                    match r {
                        Some(r) if *r < rows => data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]),
                        Some(r) => {
                            return Err(DiffError::BadIndex {
                                op: self.name(),
                                index: *r,
                                len: rows,
                            })
                        }
                        None => data.extend(std::iter::repeat_n(0.0, cols)),
                    }
                }
                Tensor::new(vec![idx.len(), cols], data)
            }
        }
    }

    /// Vector-Jacobian product: gradients of the inputs given the gradient of
    /// the output. Inputs with `needs[i] == false` get `None`.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
            if !needs[0] {
                return vec![None];
            }
            let data = (0..grad.numel()).map(f).collect();
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).unwrap())]
        };
        let g = grad.data();
        match self {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let mode = Broadcast::of(a, b).expect("validated in forward");
                let ga = needs[0].then(|| match self {
                    Op::Mul => {
                        let bd = b.data();
                        let data = g.iter().enumerate().map(|(i, gv)| gv * mode.pick(bd, i)).collect();
                        Tensor::new(a.shape().to_vec(), data).unwrap()
                    }
                    _ => grad.clone(),
                });
                let gb = needs[1].then(|| {
                    let per_elem: Vec<f64> = match self {
                        Op::Add => g.to_vec(),
                        Op::Sub => g.iter().map(|v| -v).collect(),
                        _ => g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect(),
                    };
                    mode.reduce(&per_elem, b.shape())
                });
                vec![ga, gb]
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs[0].then(|| {
                    // dA = G B^T
                    let mut out = vec![0.0; m * k];
                    let bd = b.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::new(vec![m, k], out).unwrap()
                });
                let gb = needs[1].then(|| {
                    // dB = A^T G
                    let mut out = vec![0.0; k * n];
                    let ad = a.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    Tensor::new(vec![k, n], out).unwrap()
                });
                vec![ga, gb]
            }
            Op::Concat { axis } => {
                let outer: usize = inputs[0].shape()[..*axis].iter().product();
                let chunks: Vec<usize> = inputs.iter().map(|t| t.shape()[*axis..].iter().product()).collect();
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for (t, (&c, &need)) in inputs.iter().zip(chunks.iter().zip(needs)) {
                    if need {
                        let mut data = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            let base = o * total + offset;
                            data.extend_from_slice(&g[base..base + c]);
                        }
                        out.push(Some(Tensor::new(t.shape().to_vec(), data).unwrap()));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::Slice { start, end } => {
                if !needs[0] {
                    return vec![None];
                }
                let x = inputs[0];
                let cols = x.last_dim();
                let width = end - start;
                let mut data = vec![0.0; x.numel()];
                for (r, grow) in g.chunks(width).enumerate() {
                    data[r * cols + start..r * cols + end].copy_from_slice(grow);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }
            Op::Tanh => {
                let y = output.data();
                unary(&|i| g[i] * (1.0 - y[i] * y[i]))
            }
            Op::Sigmoid => {
                let y = output.data();
                unary(&|i| g[i] * y[i] * (1.0 - y[i]))
            }
            Op::Relu => {
                let x = inputs[0].data();
                unary(&|i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Exp => {
                let y = output.data();
                unary(&|i| g[i] * y[i])
            }
            Op::Log => {
                let x = inputs[0].data();
                unary(&|i| g[i] / x[i])
            }
            Op::Sqrt => {
                let y = output.data();
                unary(&|i| g[i] / (2.0 * y[i]))
            }
            Op::Square => {
                let x = inputs[0].data();
                unary(&|i| 2.0 * x[i] * g[i])
            }
            Op::Scale(s) => unary(&|i| s * g[i]),
            Op::Sum => {
                if !needs[0] {
                    return vec![None];
                }
                vec![Some(Tensor::filled(inputs[0].shape(), g[0]))]
            }
            Op::Mean => {
                if !needs[0] {
                    return vec![None];
                }
                let n = inputs[0].numel() as f64;
                vec![Some(Tensor::filled(inputs[0].shape(), g[0] / n))]
            }
            Op::Softmax => {
                if !needs[0] {
                    return vec![None];
                }
                let cols = output.last_dim();
                let y = output.data();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::new(output.shape().to_vec(), data).unwrap())]
            }
            Op::LogSoftmax => {
                if !needs[0] {
                    return vec![None];
                }
                let cols = output.last_dim();
                let y = output.data();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let gsum: f64 = gr.iter().sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gsum));
                }
                vec![Some(Tensor::new(output.shape().to_vec(), data).unwrap())]
            }
            Op::GatherRows(idx) => {
                if !needs[0] {
                    return vec![None];
                }
                let x = inputs[0];
                let cols = x.shape()[1];
                let mut data = vec![0.0; x.numel()];
                for (i, r) in idx.iter().enumerate() {
                    if let Some(r) = r {
                        for c in 0..cols {
                            data[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// Right operand holds a single value.
    Scalar,
    /// Right operand is `[1, cols]` against a `[rows, cols]` left operand.
    Row(usize),
}

impl Broadcast {
    fn of(a: &Tensor, b: &Tensor) -> Option<Self> {
        if a.shape() == b.shape() {
            Some(Broadcast::Same)
        } else if b.numel() == 1 {
            Some(Broadcast::Scalar)
        } else if a.rank() == 2 && b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1] {
            Some(Broadcast::Row(a.shape()[1]))
        } else {
            None
        }
    }

    fn pick(self, b: &[f64], i: usize) -> f64 {
        match self {
            Broadcast::Same => b[i],
            Broadcast::Scalar => b[0],
            Broadcast::Row(cols) => b[i % cols],
        }
    }

    fn reduce(self, per_elem: &[f64], b_shape: &[usize]) -> Tensor {
        let data = match self {
            Broadcast::Same => per_elem.to_vec(),
            Broadcast::Scalar => vec![per_elem.iter().sum()],
            Broadcast::Row(cols) => {
                let mut acc = vec![0.0; cols];
                for row in per_elem.chunks(cols) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc
            }
        };
        Tensor::new(b_shape.to_vec(), data).unwrap()
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (typically a parameter tensor).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// A value that is never differentiated; its gradient is reported as zero.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    /// A constant copy of `id`'s value: gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record `op` applied to `inputs` and return the new node.
    pub fn forward(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        if op == Op::Leaf {
            return Err(DiffError::Arity {
                op: "leaf",
                got: inputs.len(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode(id.0));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.eval(&values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::MatMul, &[a, b])
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let axis = self.value(parts[0]).rank().saturating_sub(1);
        self.forward(Op::Concat { axis }, parts)
    }

    /// Concatenate along the first axis.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.forward(Op::Concat { axis: 0 }, parts)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        self.forward(Op::Slice { start, end }, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Relu, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Log, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Sqrt, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Square, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Mean, &[x])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.forward(Op::Scale(s), &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.forward(Op::LogSoftmax, &[x])
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<Option<usize>>) -> Result<NodeId, DiffError> {
        self.forward(Op::GatherRows(rows), &[x])
    }

    /// Euclidean norm of all elements, `sqrt(sum(x^2) + eps)`.
    pub fn norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let sq = self.square(x)?;
        let s = self.sum(sq)?;
        let e = self.constant(Tensor::scalar(eps));
        let s = self.add(s, e)?;
        self.sqrt(s)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = node.op.vjp(&inputs, &node.value, g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Recompute every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>, DiffError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    node.op.eval(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool, DiffError> {
        let values = self.replay()?;
        Ok(values.iter().zip(&self.nodes).all(|(v, n)| v.bit_eq(&n.value)))
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// The gradient if the node was reached by the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros of the node's shape if unreached.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn collect(&self, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.wrt(id)).collect()
    }
}
