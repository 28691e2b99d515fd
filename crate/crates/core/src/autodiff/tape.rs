//! Reverse-mode tape over dense f64 tensors.
//!
//! The operation catalog is exactly what the model and losses need: matrix
//! products, sequence concatenation, row softmax / log-softmax, layer norm,
//! embedding lookup, mean pooling, dot products, causal-masked attention
//! scores, a smooth pointwise nonlinearity, and cross-entropy against token
//! indices. Nodes are recorded in forward order and replayed in exact reverse
//! order, so gradient reduction order is fixed and runs are bit-reproducible.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Sentinel for masked attention scores. Finite so tensors never hold ±inf,
/// but exp(MASKED_SCORE - rowmax) underflows to exactly 0.
pub const MASKED_SCORE: f64 = -1.0e30;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds. Attributes that are not differentiated (indices, targets,
/// constants) ride along with the kind.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// a @ b. Shapes: (r,c)@(c,n)->(r,n); (r,c)@(c,)->(r,); (c,)@(c,n)->(n,).
    MatMul,
    /// a @ b^T. Shapes: (r,c)@(n,c)->(r,n); (c,)@(n,c)->(n,).
    MatMulBT,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Constant scalar multiple.
    Scale(f64),
    /// x * s where s is a shape-[1] tensor (possibly learnable).
    MulScalar,
    /// Concatenate rank-2 tensors along the sequence (row) axis.
    ConcatRows,
    /// Row softmax.
    Softmax,
    /// Row log-softmax.
    LogSoftmax,
    /// Per-row (x - mean) / sqrt(var + eps) * gamma + beta.
    LayerNorm { eps: f64 },
    /// Gather rows of a rank-2 table.
    Lookup { indices: Vec<usize> },
    /// Mean over rows: (n,c) -> (c,).
    MeanPool,
    /// Dot product of two equal-length vectors -> shape [1].
    Dot,
    /// q @ k^T / sqrt(d) with the first `prefix_len` key rows visible to every
    /// query and the remaining rows causally masked. Masked entries hold
    /// MASKED_SCORE and never pass gradient.
    CausalScores { prefix_len: usize },
    /// x * sigmoid(x), smooth everywhere.
    Silu,
    /// Sum over (row, class) pairs of -log softmax(logits[row])[class].
    CrossEntropy { pairs: Vec<(usize, usize)> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulBT => "matmul_bt",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Lookup { .. } => "lookup",
            OpKind::MeanPool => "mean_pool",
            OpKind::Dot => "dot",
            OpKind::CausalScores { .. } => "causal_scores",
            OpKind::Silu => "silu",
            OpKind::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

enum NodeOp {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Var> },
}

struct Node {
    op: NodeOp,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn get_or_zero(&self, v: Var, tape: &Tape) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

/// Wengert list: topologically ordered nodes, backward in reverse order.
/// Single-threaded; never share a tape across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether
    /// downstream operations are recorded for backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node { op: NodeOp::Leaf, value: t, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluate `kind` on `inputs`. The node is recorded as a backward-capable
    /// operation only when some input requires gradient; otherwise the result
    /// is stored as a plain constant.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = eval_op(&kind, &tensors)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            NodeOp::Op { kind, inputs: inputs.to_vec() }
        } else {
            NodeOp::Leaf
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // Convenience wrappers used throughout the model and losses.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMulBT, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(OpKind::MulScalar, &[x, s])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[x])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn lookup(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Lookup { indices }, &[table])
    }
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::MeanPool, &[x])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }
    pub fn causal_scores(&mut self, q: Var, k: Var, prefix_len: usize) -> Result<Var> {
        self.apply(OpKind::CausalScores { prefix_len }, &[q, k])
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Silu, &[x])
    }
    pub fn cross_entropy(&mut self, logits: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        self.apply(OpKind::CrossEntropy { pairs }, &[logits])
    }

    /// Accumulate gradients of every requires-grad node reachable from `loss`.
    /// Accumulators are rebuilt from scratch on every call, so calling twice
    /// on the same tape yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.shape() != [1] {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            acc[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let upstream = match (&node.op, &acc[id]) {
                (NodeOp::Op { .. }, Some(_)) => acc[id].take().unwrap(),
                _ => continue,
            };
            let (kind, inputs) = match &node.op {
                NodeOp::Op { kind, inputs } => (kind, inputs),
                NodeOp::Leaf => unreachable!(),
            };
            let in_tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contribs = vjp(kind, &in_tensors, &node.value, &upstream);
            for (var, contrib) in inputs.iter().zip(contribs) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut acc[var.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    None => acc[var.0] = Some(contrib),
                }
            }
            // keep the loss's own seed visible in the result
            if id == loss.0 {
                acc[id] = Some(upstream);
            }
        }
        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|values| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), values)
                        .expect("gradient shape follows node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.shape().to_vec(), rhs: rhs.shape().to_vec() }
}

fn arity(op: &'static str, inputs: &[&Tensor], expected: usize) -> Result<()> {
    if inputs.len() != expected {
        return Err(Error::BadShape { op, shape: vec![inputs.len()] });
    }
    Ok(())
}

/// Forward evaluation of one operation. Pure; shape checks live here.
fn eval_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            arity("matmul", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match (a.rank(), b.rank()) {
                (2, 2) => {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let (c2, n) = (b.shape()[0], b.shape()[1]);
                    if c != c2 {
                        return Err(shape_err("matmul", a, b));
                    }
                    let mut out = vec![0.0; r * n];
                    for i in 0..r {
                        for k in 0..c {
                            let aik = a.values()[i * c + k];
                            let brow = &b.values()[k * n..(k + 1) * n];
                            let orow = &mut out[i * n..(i + 1) * n];
                            for j in 0..n {
                                orow[j] += aik * brow[j];
                            }
                        }
                    }
                    Tensor::new(vec![r, n], out)
                }
                (2, 1) => {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    if c != b.shape()[0] {
                        return Err(shape_err("matmul", a, b));
                    }
                    let mut out = vec![0.0; r];
                    for i in 0..r {
                        let mut s = 0.0;
                        for k in 0..c {
                            s += a.values()[i * c + k] * b.values()[k];
                        }
                        out[i] = s;
                    }
                    Tensor::new(vec![r], out)
                }
                (1, 2) => {
                    let c = a.shape()[0];
                    let (c2, n) = (b.shape()[0], b.shape()[1]);
                    if c != c2 {
                        return Err(shape_err("matmul", a, b));
                    }
                    let mut out = vec![0.0; n];
                    for k in 0..c {
                        let ak = a.values()[k];
                        let brow = &b.values()[k * n..(k + 1) * n];
                        for j in 0..n {
                            out[j] += ak * brow[j];
                        }
                    }
                    Tensor::new(vec![n], out)
                }
                _ => Err(shape_err("matmul", a, b)),
            }
        }
        OpKind::MatMulBT => {
            arity("matmul_bt", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if b.rank() != 2 {
                return Err(shape_err("matmul_bt", a, b));
            }
            let (n, c) = (b.shape()[0], b.shape()[1]);
            match a.rank() {
                2 => {
                    let (r, c2) = (a.shape()[0], a.shape()[1]);
                    if c != c2 {
                        return Err(shape_err("matmul_bt", a, b));
                    }
                    let mut out = vec![0.0; r * n];
                    for i in 0..r {
                        let arow = a.row(i);
                        for k in 0..n {
                            let brow = b.row(k);
                            let mut s = 0.0;
                            for j in 0..c {
                                s += arow[j] * brow[j];
                            }
                            out[i * n + k] = s;
                        }
                    }
                    Tensor::new(vec![r, n], out)
                }
                1 => {
                    if a.shape()[0] != c {
                        return Err(shape_err("matmul_bt", a, b));
                    }
                    let mut out = vec![0.0; n];
                    for k in 0..n {
                        let brow = b.row(k);
                        let mut s = 0.0;
                        for j in 0..c {
                            s += a.values()[j] * brow[j];
                        }
                        out[k] = s;
                    }
                    Tensor::new(vec![n], out)
                }
                _ => Err(shape_err("matmul_bt", a, b)),
            }
        }
        OpKind::Add => {
            arity("add", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("add", a, b));
            }
            let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), values)
        }
        OpKind::Scale(c) => {
            arity("scale", inputs, 1)?;
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| c * v).collect())
        }
        OpKind::MulScalar => {
            arity("mul_scalar", inputs, 2)?;
            let (x, s) = (inputs[0], inputs[1]);
            if s.shape() != [1] {
                return Err(shape_err("mul_scalar", x, s));
            }
            let c = s.values()[0];
            Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| c * v).collect())
        }
        OpKind::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::BadShape { op: "concat_rows", shape: vec![0] });
            }
            let cols = inputs[0].n_cols();
            let mut rows = 0;
            for t in inputs {
                if t.rank() != 2 || t.n_cols() != cols {
                    return Err(shape_err("concat_rows", inputs[0], t));
                }
                rows += t.shape()[0];
            }
            let mut values = Vec::with_capacity(rows * cols);
            for t in inputs {
                values.extend_from_slice(t.values());
            }
            Tensor::new(vec![rows, cols], values)
        }
        OpKind::Softmax => {
            arity("softmax", inputs, 1)?;
            rowwise(inputs[0], "softmax", |row, out| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = (x - m).exp();
                    z += *o;
                }
                for o in out.iter_mut() {
                    *o /= z;
                }
            })
        }
        OpKind::LogSoftmax => {
            arity("log_softmax", inputs, 1)?;
            rowwise(inputs[0], "log_softmax", |row, out| {
                let lse = log_sum_exp(row);
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = x - lse;
                }
            })
        }
        OpKind::LayerNorm { eps } => {
            arity("layer_norm", inputs, 3)?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let c = x.n_cols();
            if x.rank() > 2 || gamma.shape() != [c] || beta.shape() != [c] {
                return Err(shape_err("layer_norm", x, gamma));
            }
            let g = gamma.values();
            let b = beta.values();
            rowwise(x, "layer_norm", |row, out| {
                let (mean, inv_std) = moments(row, *eps);
                for j in 0..row.len() {
                    out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            })
        }
        OpKind::Lookup { indices } => {
            arity("lookup", inputs, 1)?;
            let table = inputs[0];
            if table.rank() != 2 {
                return Err(Error::BadShape { op: "lookup", shape: table.shape().to_vec() });
            }
            let rows = table.shape()[0];
            let cols = table.shape()[1];
            if indices.is_empty() {
                return Err(Error::BadShape { op: "lookup", shape: vec![0] });
            }
            let mut values = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(Error::IndexOutOfBounds { op: "lookup", index: i, bound: rows });
                }
                values.extend_from_slice(table.row(i));
            }
            Tensor::new(vec![indices.len(), cols], values)
        }
        OpKind::MeanPool => {
            arity("mean_pool", inputs, 1)?;
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(Error::BadShape { op: "mean_pool", shape: x.shape().to_vec() });
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; c];
            for i in 0..n {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= n as f64;
            }
            Tensor::new(vec![c], out)
        }
        OpKind::Dot => {
            arity("dot", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 1 || a.shape() != b.shape() {
                return Err(shape_err("dot", a, b));
            }
            let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
            Ok(Tensor::scalar(s))
        }
        OpKind::CausalScores { prefix_len } => {
            arity("causal_scores", inputs, 2)?;
            let (q, k) = (inputs[0], inputs[1]);
            if q.rank() != 2 || k.rank() != 2 || q.n_cols() != k.n_cols() {
                return Err(shape_err("causal_scores", q, k));
            }
            let (m, d) = (q.shape()[0], q.shape()[1]);
            let n = k.shape()[0];
            if *prefix_len > n || (n - prefix_len != 0 && n - prefix_len != m) {
                return Err(shape_err("causal_scores", q, k));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let mut out = vec![MASKED_SCORE; m * n];
            for i in 0..m {
                let qrow = q.row(i);
                for j in 0..n {
                    if j >= *prefix_len && j - prefix_len > i {
                        continue;
                    }
                    let krow = k.row(j);
                    let mut s = 0.0;
                    for t in 0..d {
                        s += qrow[t] * krow[t];
                    }
                    out[i * n + j] = s * scale;
                }
            }
            Tensor::new(vec![m, n], out)
        }
        OpKind::Silu => {
            arity("silu", inputs, 1)?;
            let x = inputs[0];
            let values = x.values().iter().map(|&v| v * sigmoid(v)).collect();
            Tensor::new(x.shape().to_vec(), values)
        }
        OpKind::CrossEntropy { pairs } => {
            arity("cross_entropy", inputs, 1)?;
            let logits = inputs[0];
            if logits.rank() > 2 {
                return Err(Error::BadShape { op: "cross_entropy", shape: logits.shape().to_vec() });
            }
            if pairs.is_empty() {
                return Err(Error::EmptySpan("cross_entropy"));
            }
            let (rows, cols) = (logits.n_rows(), logits.n_cols());
            let mut total = 0.0;
            for &(row, class) in pairs {
                if row >= rows {
                    return Err(Error::IndexOutOfBounds { op: "cross_entropy", index: row, bound: rows });
                }
                if class >= cols {
                    return Err(Error::IndexOutOfBounds { op: "cross_entropy", index: class, bound: cols });
                }
                let r = &logits.values()[row * cols..(row + 1) * cols];
                total += log_sum_exp(r) - r[class];
            }
            Ok(Tensor::scalar(total))
        }
    }
}

/// Vector-Jacobian products. `inputs` and `output` are the forward tensors,
/// `upstream` the incoming gradient (same shape as the output). Returns one
/// gradient buffer per input, in input order.
fn vjp(kind: &OpKind, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; b.numel()];
            match (a.rank(), b.rank()) {
                (2, 2) => {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    for i in 0..r {
                        for k in 0..c {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += upstream[i * n + j] * b.values()[k * n + j];
                            }
                            da[i * c + k] = s;
                        }
                    }
                    for k in 0..c {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..r {
                                s += a.values()[i * c + k] * upstream[i * n + j];
                            }
                            db[k * n + j] = s;
                        }
                    }
                }
                (2, 1) => {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    for i in 0..r {
                        for k in 0..c {
                            da[i * c + k] = upstream[i] * b.values()[k];
                            db[k] += upstream[i] * a.values()[i * c + k];
                        }
                    }
                }
                (1, 2) => {
                    let c = a.shape()[0];
                    let n = b.shape()[1];
                    for k in 0..c {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += upstream[j] * b.values()[k * n + j];
                            db[k * n + j] = a.values()[k] * upstream[j];
                        }
                        da[k] = s;
                    }
                }
                _ => unreachable!("validated in eval_op"),
            }
            vec![da, db]
        }
        OpKind::MatMulBT => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, c) = (b.shape()[0], b.shape()[1]);
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; b.numel()];
            let r = a.n_rows();
            for i in 0..r {
                let arow = &a.values()[i * c..(i + 1) * c];
                for k in 0..n {
                    let u = upstream[i * n + k];
                    if u == 0.0 {
                        continue;
                    }
                    let brow = b.row(k);
                    for j in 0..c {
                        da[i * c + j] += u * brow[j];
                        db[k * c + j] += u * arow[j];
                    }
                }
            }
            vec![da, db]
        }
        OpKind::Add => vec![upstream.to_vec(), upstream.to_vec()],
        OpKind::Scale(c) => vec![upstream.iter().map(|u| c * u).collect()],
        OpKind::MulScalar => {
            let (x, s) = (inputs[0], inputs[1]);
            let c = s.values()[0];
            let dx = upstream.iter().map(|u| c * u).collect();
            let ds: f64 = upstream.iter().zip(x.values()).map(|(u, v)| u * v).sum();
            vec![dx, vec![ds]]
        }
        OpKind::ConcatRows => {
            let mut out = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let n = t.numel();
                out.push(upstream[offset..offset + n].to_vec());
                offset += n;
            }
            out
        }
        OpKind::Softmax => {
            let x = inputs[0];
            let (rows, cols) = (x.n_rows(), x.n_cols());
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                let y = &output.values()[r * cols..(r + 1) * cols];
                let dy = &upstream[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dx[r * cols + j] = y[j] * (dy[j] - dot);
                }
            }
            vec![dx]
        }
        OpKind::LogSoftmax => {
            let x = inputs[0];
            let (rows, cols) = (x.n_rows(), x.n_cols());
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                let xr = &x.values()[r * cols..(r + 1) * cols];
                let dy = &upstream[r * cols..(r + 1) * cols];
                let sum_dy: f64 = dy.iter().sum();
                let lse = log_sum_exp(xr);
                for j in 0..cols {
                    dx[r * cols + j] = dy[j] - (xr[j] - lse).exp() * sum_dy;
                }
            }
            vec![dx]
        }
        OpKind::LayerNorm { eps } => {
            let (x, gamma, _beta) = (inputs[0], inputs[1], inputs[2]);
            let (rows, cols) = (x.n_rows(), x.n_cols());
            let g = gamma.values();
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let xr = &x.values()[r * cols..(r + 1) * cols];
                let dy = &upstream[r * cols..(r + 1) * cols];
                let (mean, inv_std) = moments(xr, *eps);
                let nf = cols as f64;
                let mut mean_gdy = 0.0;
                let mut mean_gdy_xhat = 0.0;
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * inv_std;
                    let gdy = dy[j] * g[j];
                    mean_gdy += gdy;
                    mean_gdy_xhat += gdy * xhat;
                    dgamma[j] += dy[j] * xhat;
                    dbeta[j] += dy[j];
                }
                mean_gdy /= nf;
                mean_gdy_xhat /= nf;
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * inv_std;
                    dx[r * cols + j] = (dy[j] * g[j] - mean_gdy - xhat * mean_gdy_xhat) * inv_std;
                }
            }
            vec![dx, dgamma, dbeta]
        }
        OpKind::Lookup { indices } => {
            let table = inputs[0];
            let cols = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (pos, &i) in indices.iter().enumerate() {
                for j in 0..cols {
                    dt[i * cols + j] += upstream[pos * cols + j];
                }
            }
            vec![dt]
        }
        OpKind::MeanPool => {
            let x = inputs[0];
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let inv = 1.0 / n as f64;
            let mut dx = vec![0.0; x.numel()];
            for i in 0..n {
                for j in 0..c {
                    dx[i * c + j] = upstream[j] * inv;
                }
            }
            vec![dx]
        }
        OpKind::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            let u = upstream[0];
            vec![
                b.values().iter().map(|v| u * v).collect(),
                a.values().iter().map(|v| u * v).collect(),
            ]
        }
        OpKind::CausalScores { prefix_len } => {
            let (q, k) = (inputs[0], inputs[1]);
            let (m, d) = (q.shape()[0], q.shape()[1]);
            let n = k.shape()[0];
            let scale = 1.0 / (d as f64).sqrt();
            let mut dq = vec![0.0; q.numel()];
            let mut dk = vec![0.0; k.numel()];
            for i in 0..m {
                for j in 0..n {
                    if j >= *prefix_len && j - prefix_len > i {
                        continue;
                    }
                    let u = upstream[i * n + j] * scale;
                    if u == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        dq[i * d + t] += u * k.values()[j * d + t];
                        dk[j * d + t] += u * q.values()[i * d + t];
                    }
                }
            }
            vec![dq, dk]
        }
        OpKind::Silu => {
            let x = inputs[0];
            let dx = x
                .values()
                .iter()
                .zip(upstream)
                .map(|(&v, u)| {
                    let s = sigmoid(v);
                    u * (s + v * s * (1.0 - s))
                })
                .collect();
            vec![dx]
        }
        OpKind::CrossEntropy { pairs } => {
            let logits = inputs[0];
            let cols = logits.n_cols();
            let u = upstream[0];
            let mut dx = vec![0.0; logits.numel()];
            for &(row, class) in pairs {
                let r = &logits.values()[row * cols..(row + 1) * cols];
                let lse = log_sum_exp(r);
                for j in 0..cols {
                    dx[row * cols + j] += u * (r[j] - lse).exp();
                }
                dx[row * cols + class] -= u;
            }
            vec![dx]
        }
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

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Apply `f` to each row of a rank-1/2 tensor, writing into a same-shape output.
fn rowwise(x: &Tensor, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    if x.rank() > 2 {
        return Err(Error::BadShape { op, shape: x.shape().to_vec() });
    }
    let (rows, cols) = (x.n_rows(), x.n_cols());
    let mut values = vec![0.0; x.numel()];
    for r in 0..rows {
        f(&x.values()[r * cols..(r + 1) * cols], &mut values[r * cols..(r + 1) * cols]);
    }
    Tensor::new(x.shape().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0, 0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let x = tape.constant(t1(&[3.5, -2.25]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).values(), &[3.5, -2.25]);
    }

    #[test]
    fn mean_pool_direct_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = tape.mean_pool(x).unwrap();
        // oracle: column means computed by hand
        assert_eq!(tape.value(y).values(), &[2.0, 3.0]);
    }

    #[test]
    fn dot_gradient_accumulates_both_uses() {
        // d/dx (x.x) at x=3 is 2x = 6; x feeds both dot arguments.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0]).with_grad());
        let y = tape.dot(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]).with_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get_or_zero(x, &tape).values(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        // analytic oracle computed right here, independent of the vjp code path
        let z = [1.0, 2.0, 3.0];
        let target = 1usize;
        let lse = log_sum_exp(&z);
        let expected: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, &v)| (v - lse).exp() - if j == target { 1.0 } else { 0.0 })
            .collect();

        let mut tape = Tape::new();
        let logits = tape.leaf(t1(&z).with_grad());
        let loss = tape.cross_entropy(logits, vec![(0, target)]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, e) in grads.get(logits).unwrap().values().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.3, -1.2, 2.0]).with_grad());
        let s = tape.softmax(x).unwrap();
        let w = tape.constant(t1(&[1.0, -2.0, 0.5]));
        let loss = tape.dot(s, w).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(x).unwrap().values(), g2.get(x).unwrap().values());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_operation_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(t1(&[1.0, 2.0, 3.0]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[1, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn causal_scores_mask_pattern() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0], vec![4.0]]).unwrap());
        // one prefix row visible everywhere, two causal rows
        let s = tape.causal_scores(q, k, 1).unwrap();
        let v = tape.value(s).values();
        assert_eq!(v[0], 2.0); // prefix visible to query 0
        assert_eq!(v[1], 3.0); // own position
        assert_eq!(v[2], MASKED_SCORE); // future
        assert_eq!(v[5], 4.0); // query 1 sees key 1
    }

    #[test]
    fn masked_scores_vanish_under_softmax() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap());
        let s = tape.causal_scores(q, k, 0).unwrap();
        let a = tape.softmax(s).unwrap();
        let v = tape.value(a).values();
        assert_eq!(v[0], 1.0); // row 0: only itself visible
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_on_constants_records_no_backward_node() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0, 2.0]));
        let b = tape.constant(t1(&[3.0, 4.0]));
        let y = tape.add(a, b).unwrap();
        assert!(!tape.requires_grad(y));
        let g = tape.leaf(t1(&[1.0, 1.0]).with_grad());
        let z = tape.add(y, g).unwrap();
        assert!(tape.requires_grad(z));
    }

    #[test]
    fn determinism_bit_identical_across_tapes() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t1(&[0.1, 0.2, 0.3, 0.4]).with_grad());
            let w = tape.constant(
                Tensor::from_rows(&[
                    vec![0.5, -0.25, 1.5, 0.75],
                    vec![2.0, 0.125, -0.5, 0.3],
                ])
                .unwrap(),
            );
            let h = tape.matmul(w, x).unwrap();
            let s = tape.softmax(h).unwrap();
            let loss = tape.cross_entropy(s, vec![(0, 1)]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                grads
                    .get(x)
                    .unwrap()
                    .values()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
