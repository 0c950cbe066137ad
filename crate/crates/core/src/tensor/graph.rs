use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{dot, matmul_acc, sigmoid, softplus, Element, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Mean,
    Max,
}

enum Op<T> {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
    },
    PoolMean {
        x: usize,
    },
    PoolMax {
        x: usize,
        argmax: Vec<usize>,
    },
    LogSumExp {
        x: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale {
        x: usize,
        factor: T,
    },
    Offset {
        x: usize,
    },
    Sum {
        x: usize,
    },
    RowSums {
        x: usize,
    },
    BroadcastRows {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
        a_cols: usize,
        b_cols: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Stack {
        xs: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b, .. } => vec![*x, *w, *b],
            Op::Activation { x, .. }
            | Op::PoolMean { x }
            | Op::PoolMax { x, .. }
            | Op::LogSumExp { x }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Sum { x }
            | Op::RowSums { x }
            | Op::BroadcastRows { x }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Stack { xs } => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    kinks: Option<DefaultHasher>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node upstream of it.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `v` does not influence the loss (or is foreign).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// A graph that fingerprints every relu sign pattern and max-pool argmax,
    /// so finite-difference checks can detect when a perturbation crosses a kink.
    pub fn with_kink_tracking() -> Self {
        let mut g = Self::new();
        g.kinks = Some(DefaultHasher::new());
        g
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Panics if `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.try_value(v).expect("variable from another graph")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// First element of `v` (its value when `v` is a scalar).
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// `x W + b` over the last axis of `x`, broadcast across leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let inner = xv.cols();
        if xv.rank() == 0 || wv.rank() != 2 || wv.shape()[0] != inner {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let cols = wv.shape()[1];
        if bv.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "affine bias",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        matmul_acc(xv.data(), wv.data(), &mut out, rows, inner, cols);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cols;
        let value = Tensor::new(shape, out)?;
        self.push(
            "affine",
            value,
            Op::Affine {
                x: xi,
                w: wi,
                b: bi,
                rows,
                inner,
                cols,
            },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let f: fn(T) -> T = match kind {
            Activation::Relu => |t| t.max(T::zero()),
            Activation::Sigmoid => sigmoid,
            Activation::Softplus => softplus,
            Activation::Exp => |t| t.exp(),
            Activation::Log => |t| t.ln(),
        };
        if kind == Activation::Log {
            if let Some(bad) = xv.data().iter().find(|&&t| t <= T::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    value: bad.as_f64(),
                });
            }
        }
        if kind == Activation::Relu {
            if let Some(h) = self.kinks.as_mut() {
                for &t in self.nodes[xi].value.data() {
                    (t > T::zero()).hash(h);
                }
            }
        }
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&t| f(t)).collect())?;
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
            Activation::Log => "log",
        };
        self.push(name, value, Op::Activation { x: xi, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Log)
    }

    /// Reduces a `[n, d]` set to `[d]`. Max ties go to the lowest row.
    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "pool",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        if n == 0 {
            return Err(TensorError::EmptySet("pool"));
        }
        match mode {
            PoolMode::Mean => {
                let mut acc = xv.row(0).to_vec();
                for r in 1..n {
                    for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                        *a = *a + v;
                    }
                }
                let inv = T::from_f64(n as f64);
                let value = Tensor::vector(acc.into_iter().map(|a| a / inv).collect());
                self.push("mean pool", value, Op::PoolMean { x: xi })
            }
            PoolMode::Max => {
                let mut best = xv.row(0).to_vec();
                let mut argmax = vec![0usize; d];
                for r in 1..n {
                    for (j, &v) in xv.row(r).iter().enumerate() {
                        if v > best[j] {
                            best[j] = v;
                            argmax[j] = r;
                        }
                    }
                }
                if let Some(h) = self.kinks.as_mut() {
                    argmax.hash(h);
                }
                self.push("max pool", Tensor::vector(best), Op::PoolMax { x: xi, argmax })
            }
        }
    }

    /// `log Σ exp(x_i)` over every element, by max-shift.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.numel() == 0 {
            return Err(TensorError::EmptySet("logsumexp"));
        }
        let m = xv.data().iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = xv.data().iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b);
        self.push("logsumexp", Tensor::scalar(m + s.ln()), Op::LogSumExp { x: xi })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op(ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.mul(x, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let c = T::from_f64(factor);
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push("scale", value, Op::Scale { x: xi, factor: c })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.scale(x, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, shift: f64) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let c = T::from_f64(shift);
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v + c).collect())?;
        self.push("offset", value, Op::Offset { x: xi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: xi })
    }

    /// `[n, d] -> [n]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let sums = (0..xv.rows())
            .map(|r| xv.row(r).iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        self.push("row sums", Tensor::vector(sums), Op::RowSums { x: xi })
    }

    /// Repeats a `[d]` vector as `n` rows of a `[n, d]` matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let d = xv.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("broadcast rows", value, Op::BroadcastRows { x: xi })
    }

    /// Joins along the last axis. A rank-1 operand is repeated across the rows
    /// of a rank-2 partner.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "concat",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() == 0 || bv.rank() == 0 || av.rank() > 2 || bv.rank() > 2 {
            return Err(mismatch());
        }
        let rows = match (av.rank(), bv.rank()) {
            (2, 2) if av.shape()[0] != bv.shape()[0] => return Err(mismatch()),
            (2, _) => Some(av.shape()[0]),
            (_, 2) => Some(bv.shape()[0]),
            _ => None,
        };
        let (ac, bc) = (av.cols(), bv.cols());
        let n = rows.unwrap_or(1);
        let mut data = Vec::with_capacity(n * (ac + bc));
        for r in 0..n {
            data.extend_from_slice(if av.rank() == 2 { av.row(r) } else { av.data() });
            data.extend_from_slice(if bv.rank() == 2 { bv.row(r) } else { bv.data() });
        }
        let shape = match rows {
            Some(n) => vec![n, ac + bc],
            None => vec![ac + bc],
        };
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                a: ai,
                b: bi,
                a_cols: ac,
                b_cols: bc,
            },
        )
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() == 0 || start > end || end > xv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, data)?;
        self.push("slice cols", value, Op::SliceCols { x: xi, start })
    }

    /// Rows `start..end` of a `[n, d]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 || start > end || end > xv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let d = xv.cols();
        let value = Tensor::new(vec![end - start, d], xv.data()[start * d..end * d].to_vec())?;
        self.push("slice rows", value, Op::SliceRows { x: xi, start })
    }

    /// Packs scalars into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let mut idx = Vec::with_capacity(xs.len());
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let i = self.idx(x)?;
            let v = &self.nodes[i].value;
            if v.numel() != 1 {
                return Err(TensorError::NotScalar(v.shape().to_vec()));
            }
            idx.push(i);
            data.push(v.item());
        }
        self.push("stack", Tensor::vector(data), Op::Stack { xs: idx })
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.rows() != labels.len() || labels.iter().any(|&l| l >= lv.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax cross entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(TensorError::EmptySet("softmax cross entropy"));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = lv.row(r).iter().map(|v| v.as_f64()).collect();
            total += super::logsumexp(&row) - row[label];
        }
        let value = Tensor::scalar(T::from_f64(total / labels.len() as f64));
        self.push(
            "softmax cross entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |j: usize| &self.nodes[j].value;
        let req = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Affine {
                x,
                w,
                b,
                rows,
                inner,
                cols,
            } => {
                if req(x) {
                    let wv = val(w).data();
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for r in 0..rows {
                            let grow = &gd[r * cols..(r + 1) * cols];
                            for k in 0..inner {
                                dx[r * inner + k] = dx[r * inner + k] + dot(grow, &wv[k * cols..(k + 1) * cols]);
                            }
                        }
                    });
                }
                if req(w) {
                    let xv = val(x).data();
                    accumulate(&mut grads[w], val(w).shape(), |dw| {
                        for r in 0..rows {
                            let grow = &gd[r * cols..(r + 1) * cols];
                            for k in 0..inner {
                                let a = xv[r * inner + k];
                                if a == T::zero() {
                                    continue;
                                }
                                for (o, &gv) in dw[k * cols..(k + 1) * cols].iter_mut().zip(grow) {
                                    *o = *o + a * gv;
                                }
                            }
                        }
                    });
                }
                if req(b) {
                    accumulate(&mut grads[b], val(b).shape(), |db| {
                        for r in 0..rows {
                            for (o, &gv) in db.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                                *o = *o + gv;
                            }
                        }
                    });
                }
            }
            &Op::Activation { x, kind } => {
                if !req(x) {
                    return;
                }
                let xv = val(x).data();
                let yv = node.value.data();
                accumulate(&mut grads[x], val(x).shape(), |dx| {
                    for k in 0..dx.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xv[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Sigmoid => yv[k] * (T::one() - yv[k]),
                            Activation::Softplus => sigmoid(xv[k]),
                            Activation::Exp => yv[k],
                            Activation::Log => T::one() / xv[k],
                        };
                        dx[k] = dx[k] + gd[k] * d;
                    }
                });
            }
            &Op::PoolMean { x } => {
                if !req(x) {
                    return;
                }
                let n = val(x).shape()[0];
                let d = val(x).cols();
                let inv = T::from_f64(n as f64);
                accumulate(&mut grads[x], val(x).shape(), |dx| {
                    for r in 0..n {
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + gd[j] / inv;
                        }
                    }
                });
            }
            Op::PoolMax { x, argmax } => {
                if !req(*x) {
                    return;
                }
                let d = val(*x).cols();
                accumulate(&mut grads[*x], val(*x).shape(), |dx| {
                    for (j, &r) in argmax.iter().enumerate() {
                        dx[r * d + j] = dx[r * d + j] + gd[j];
                    }
                });
            }
            &Op::LogSumExp { x } => {
                if !req(x) {
                    return;
                }
                let y = node.value.item();
                let xv = val(x).data();
                accumulate(&mut grads[x], val(x).shape(), |dx| {
                    for k in 0..dx.len() {
                        dx[k] = dx[k] + gd[0] * (xv[k] - y).exp();
                    }
                });
            }
            &Op::Add(a, b) => {
                for (j, sign) in [(a, T::one()), (b, T::one())] {
                    if req(j) {
                        accumulate(&mut grads[j], val(j).shape(), |dj| {
                            for k in 0..dj.len() {
                                dj[k] = dj[k] + sign * gd[k];
                            }
                        });
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, sign) in [(a, T::one()), (b, -T::one())] {
                    if req(j) {
                        accumulate(&mut grads[j], val(j).shape(), |dj| {
                            for k in 0..dj.len() {
                                dj[k] = dj[k] + sign * gd[k];
                            }
                        });
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if req(a) {
                    accumulate(&mut grads[a], val(a).shape(), |da| {
                        for k in 0..da.len() {
                            da[k] = da[k] + gd[k] * bv[k];
                        }
                    });
                }
                if req(b) {
                    accumulate(&mut grads[b], val(b).shape(), |db| {
                        for k in 0..db.len() {
                            db[k] = db[k] + gd[k] * av[k];
                        }
                    });
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if req(a) {
                    accumulate(&mut grads[a], val(a).shape(), |da| {
                        for k in 0..da.len() {
                            da[k] = da[k] + gd[k] / bv[k];
                        }
                    });
                }
                if req(b) {
                    accumulate(&mut grads[b], val(b).shape(), |db| {
                        for k in 0..db.len() {
                            db[k] = db[k] - gd[k] * av[k] / (bv[k] * bv[k]);
                        }
                    });
                }
            }
            &Op::Scale { x, factor } => {
                if req(x) {
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for k in 0..dx.len() {
                            dx[k] = dx[k] + gd[k] * factor;
                        }
                    });
                }
            }
            &Op::Offset { x } => {
                if req(x) {
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for k in 0..dx.len() {
                            dx[k] = dx[k] + gd[k];
                        }
                    });
                }
            }
            &Op::Sum { x } => {
                if req(x) {
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for v in dx.iter_mut() {
                            *v = *v + gd[0];
                        }
                    });
                }
            }
            &Op::RowSums { x } => {
                if req(x) {
                    let d = val(x).cols();
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for (k, v) in dx.iter_mut().enumerate() {
                            *v = *v + gd[k / d];
                        }
                    });
                }
            }
            &Op::BroadcastRows { x } => {
                if req(x) {
                    let d = val(x).numel();
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for row in gd.chunks_exact(d) {
                            for (o, &gv) in dx.iter_mut().zip(row) {
                                *o = *o + gv;
                            }
                        }
                    });
                }
            }
            &Op::Concat { a, b, a_cols, b_cols } => {
                let width = a_cols + b_cols;
                for (j, offset, cols) in [(a, 0, a_cols), (b, a_cols, b_cols)] {
                    if !req(j) {
                        continue;
                    }
                    let own_rows = val(j).rank() == 2;
                    accumulate(&mut grads[j], val(j).shape(), |dj| {
                        for (r, grow) in gd.chunks_exact(width).enumerate() {
                            let dst = if own_rows { &mut dj[r * cols..(r + 1) * cols] } else { &mut dj[..] };
                            for (o, &gv) in dst.iter_mut().zip(&grow[offset..offset + cols]) {
                                *o = *o + gv;
                            }
                        }
                    });
                }
            }
            &Op::SliceCols { x, start } => {
                if req(x) {
                    let in_cols = val(x).cols();
                    let w = node.value.cols();
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for (r, grow) in gd.chunks_exact(w.max(1)).enumerate().take(node.value.rows()) {
                            for (o, &gv) in dx[r * in_cols + start..r * in_cols + start + w].iter_mut().zip(grow) {
                                *o = *o + gv;
                            }
                        }
                    });
                }
            }
            &Op::SliceRows { x, start } => {
                if req(x) {
                    let d = val(x).cols();
                    accumulate(&mut grads[x], val(x).shape(), |dx| {
                        for (o, &gv) in dx[start * d..start * d + gd.len()].iter_mut().zip(gd) {
                            *o = *o + gv;
                        }
                    });
                }
            }
            Op::Stack { xs } => {
                for (k, &j) in xs.iter().enumerate() {
                    if req(j) {
                        accumulate(&mut grads[j], val(j).shape(), |dj| {
                            dj[0] = dj[0] + gd[k];
                        });
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let li = *logits;
                if !req(li) {
                    return;
                }
                let lv = val(li);
                let c = lv.cols();
                let scale = gd[0].as_f64() / labels.len() as f64;
                accumulate(&mut grads[li], lv.shape(), |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row: Vec<f64> = lv.row(r).iter().map(|v| v.as_f64()).collect();
                        let lse = super::logsumexp(&row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 };
                            dl[r * c + j] = dl[r * c + j] + T::from_f64(scale * p);
                        }
                    }
                });
            }
        }
    }
}
