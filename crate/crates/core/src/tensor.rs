//! Dense row-major tensors and a reverse-mode tape.
//!
//! Values flow through a [`Graph`] as [`Var`] handles. Every op checks its
//! input shapes, rejects non-finite data and appends a node; [`Graph::backward`]
//! walks the nodes in reverse and accumulates gradients into the leaves.
//!
//! Summation order is fixed (sequential, index-ascending) everywhere so that two
//! runs with the same inputs produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense 64-bit tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Builds an `[rows.len(), width]` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(TensorError::ShapeMismatch { op: "from_rows", lhs: vec![width], rhs: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], data)
    }

    /// A trainable parameter: `requires_grad` set, gradient zeroed.
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if flag && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn matrix_dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    fn detached(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { shape, data, requires_grad: false, grad: None }
    }
}

/// Clamps every entry of every parameter into `[-c, c]`.
pub fn clip_weights<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, c: f64) {
    for p in params {
        for x in p.data_mut() {
            *x = x.clamp(-c, c);
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    Mean(Var),
    Sum(Var),
    SumRows(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Square(Var),
    L2SqDist(Var, Var),
    CrossEntropy { logits: Var, target: Vec<f64> },
    Cosine(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::L2SqDist(..) => "l2_sq_dist",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Cosine(..) => "cosine",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Leaf gradients persist across [`Graph::backward`] calls and accumulate
/// until [`Graph::zero_grad`] or [`Graph::clear`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// How the right operand of an elementwise op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[1, n]`, repeated down the rows.
    Row,
    /// rhs is `[m, 1]`, repeated across the columns.
    Col,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records a leaf. It participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let requires_grad = t.requires_grad;
        let value = Tensor::detached(t.shape, t.data);
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// Records a copy of a parameter as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let mut v = Tensor::detached(t.shape.clone(), t.data.clone());
        v.requires_grad = true;
        self.leaf(v)
    }

    /// Records a copy of `t` as a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(Tensor::detached(t.shape.clone(), t.data.clone()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.nodes[v.0].value.clone();
        self.constant(&t)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, Tensor::detached(shape, data), requires_grad))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var, allow: Broadcast) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            return Ok(Broadcast::Same);
        }
        let (m, n) = ta.matrix_dims();
        let (bm, bn) = tb.matrix_dims();
        match allow {
            Broadcast::Row if ta.shape.len() == 2 && bm == 1 && bn == n => Ok(Broadcast::Row),
            Broadcast::Col if ta.shape.len() == 2 && bm == m && bn == 1 && tb.shape.len() == 2 => Ok(Broadcast::Col),
            _ => Err(TensorError::ShapeMismatch { op, lhs: ta.shape.clone(), rhs: tb.shape.clone() }),
        }
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let (m, k) = ta.matrix_dims();
        let n = tb.shape[1];
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.record(Op::MatMul(a, b), vec![m, n], out, &[a, b])
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.broadcast("add", a, b, Broadcast::Row)?;
        let data = self.zip_broadcast(a, b, mode, |x, y| x + y);
        let shape = self.value(a).shape.clone();
        self.record(Op::Add(a, b), shape, data, &[a, b])
    }

    /// Elementwise difference with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.broadcast("sub", a, b, Broadcast::Row)?;
        let data = self.zip_broadcast(a, b, mode, |x, y| x - y);
        let shape = self.value(a).shape.clone();
        self.record(Op::Sub(a, b), shape, data, &[a, b])
    }

    /// Elementwise product; `b` may also be an `[m, 1]` column scaling each row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.broadcast("mul", a, b, Broadcast::Col)?;
        let data = self.zip_broadcast(a, b, mode, |x, y| x * y);
        let shape = self.value(a).shape.clone();
        self.record(Op::Mul(a, b), shape, data, &[a, b])
    }

    /// Elementwise quotient with the same broadcasting rule as [`Graph::mul`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.broadcast("div", a, b, Broadcast::Col)?;
        if self.value(b).data.contains(&0.0) {
            return Err(TensorError::NonFinite { op: "div" });
        }
        let data = self.zip_broadcast(a, b, mode, |x, y| x / y);
        let shape = self.value(a).shape.clone();
        self.record(Op::Div(a, b), shape, data, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scalar_mul" });
        }
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        self.record(Op::ScalarMul(a, c), shape, data, &[a])
    }

    /// Mean of all entries, as a `[1, 1]` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = seq_sum(&t.data) / t.data.len() as f64;
        self.record(Op::Mean(a), vec![1, 1], vec![s], &[a])
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = seq_sum(&self.value(a).data);
        self.record(Op::Sum(a), vec![1, 1], vec![s], &[a])
    }

    /// Per-row sums, `[m, n] → [m, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.matrix_dims();
        let data = (0..m).map(|i| seq_sum(t.row(i))).collect();
        self.record(Op::SumRows(a), vec![m, 1], data, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| if x > 0.0 { x } else { alpha * x }).collect();
        let shape = t.shape.clone();
        self.record(Op::LeakyRelu(a, alpha), shape, data, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        self.record(Op::Sigmoid(a), shape, data, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.matrix_dims();
        let mut data = Vec::with_capacity(t.data.len());
        for i in 0..m {
            data.extend(softmax(t.row(i)));
        }
        let shape = t.shape.clone();
        self.record(Op::SoftmaxRows(a), shape, data, &[a])
    }

    /// Natural log; non-positive entries are rejected as non-finite.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x.ln()).collect();
        let shape = t.shape.clone();
        self.record(Op::Log(a), shape, data, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x * x).collect();
        let shape = t.shape.clone();
        self.record(Op::Square(a), shape, data, &[a])
    }

    /// Per-row squared Euclidean distance, `[m, n] × [m, n] → [m, 1]`.
    pub fn l2_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch { op: "l2_sq_dist", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let m = ta.rows();
        let data =
            (0..m).map(|i| ta.row(i).iter().zip(tb.row(i)).fold(0.0, |s, (x, y)| s + (x - y) * (x - y))).collect();
        self.record(Op::L2SqDist(a, b), vec![m, 1], data, &[a, b])
    }

    /// Mean over rows of `-Σ_k y_k log softmax(logits)_k`.
    ///
    /// `target` holds one (possibly soft) label distribution per row and is
    /// treated as a constant.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape != target.shape {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        if !target.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let m = t.rows();
        let mut total = 0.0;
        for i in 0..m {
            let row = t.row(i);
            let lse = log_sum_exp(row);
            let y = target.row(i);
            let mut acc = 0.0;
            for (l, yk) in row.iter().zip(y) {
                acc += yk * (lse - l);
            }
            total += acc;
        }
        let target = target.data.clone();
        self.record(Op::CrossEntropy { logits, target }, vec![1, 1], vec![total / m as f64], &[logits])
    }

    /// Per-row cosine similarity, `[m, n] × [m, n] → [m, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch { op: "cosine", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let m = ta.rows();
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            data.push(cosine(ta.row(i), tb.row(i)).ok_or(TensorError::ZeroNorm { op: "cosine" })?);
        }
        self.record(Op::Cosine(a, b), vec![m, 1], data, &[a, b])
    }

    fn zip_broadcast(&self, a: Var, b: Var, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        ta.data
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = match mode {
                    Broadcast::Same => tb.data[idx],
                    Broadcast::Row => tb.data[idx % n],
                    Broadcast::Col => tb.data[idx / n],
                };
                f(x, y)
            })
            .collect()
    }

    /// Back-propagates from a scalar `loss`, adding ∂loss/∂leaf into every
    /// differentiable leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.data.len() != 1 {
            return Err(TensorError::NotScalar { shape: lt.shape.clone() });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.matrix_dims();
                let n = tb.shape[1];
                let mut res = Vec::new();
                if need(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(&tb.data, k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if need(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(&ta.data, m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                let mut res = vec![(*a, g.to_vec())];
                if need(*b) {
                    let tb = val(*b);
                    let gb = if tb.data.len() == g.len() {
                        g.iter().map(|x| sign * x).collect()
                    } else {
                        let n = tb.data.len();
                        let mut acc = vec![0.0; n];
                        for (idx, x) in g.iter().enumerate() {
                            acc[idx % n] += sign * x;
                        }
                        acc
                    };
                    res.push((*b, gb));
                }
                res
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.cols();
                let same = ta.data.len() == tb.data.len();
                let bval = |i: usize| if same { tb.data[i] } else { tb.data[i / n] };
                let mut res = Vec::new();
                if need(*a) {
                    res.push((*a, g.iter().enumerate().map(|(i, x)| x * bval(i)).collect()));
                }
                if need(*b) {
                    let mut gb = vec![0.0; tb.data.len()];
                    for (i, x) in g.iter().enumerate() {
                        let j = if same { i } else { i / n };
                        gb[j] += x * ta.data[i];
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.cols();
                let same = ta.data.len() == tb.data.len();
                let bidx = |i: usize| if same { i } else { i / n };
                let mut res = Vec::new();
                if need(*a) {
                    res.push((*a, g.iter().enumerate().map(|(i, x)| x / tb.data[bidx(i)]).collect()));
                }
                if need(*b) {
                    let mut gb = vec![0.0; tb.data.len()];
                    for (i, x) in g.iter().enumerate() {
                        let y = tb.data[bidx(i)];
                        gb[bidx(i)] -= x * ta.data[i] / (y * y);
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::ScalarMul(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Mean(a) => {
                let n = val(*a).data.len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).data.len()])],
            Op::SumRows(a) => {
                let ta = val(*a);
                let n = ta.cols();
                vec![(*a, (0..ta.data.len()).map(|i| g[i / n]).collect())]
            }
            Op::LeakyRelu(a, alpha) => {
                let ta = val(*a);
                vec![(*a, ta.data.iter().zip(g).map(|(&x, d)| if x > 0.0 { *d } else { alpha * d }).collect())]
            }
            Op::Sigmoid(a) => {
                vec![(*a, out.data.iter().zip(g).map(|(s, d)| d * s * (1.0 - s)).collect())]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.matrix_dims();
                let mut ga = vec![0.0; out.data.len()];
                for i in 0..m {
                    let y = &out.data[i * n..(i + 1) * n];
                    let gi = &g[i * n..(i + 1) * n];
                    let dot = y.iter().zip(gi).fold(0.0, |s, (a, b)| s + a * b);
                    for j in 0..n {
                        ga[i * n + j] = y[j] * (gi[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Log(a) => vec![(*a, val(*a).data.iter().zip(g).map(|(x, d)| d / x).collect())],
            Op::Square(a) => vec![(*a, val(*a).data.iter().zip(g).map(|(x, d)| 2.0 * x * d).collect())],
            Op::L2SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.cols();
                let ga: Vec<f64> = (0..ta.data.len()).map(|i| 2.0 * (ta.data[i] - tb.data[i]) * g[i / n]).collect();
                let gb = ga.iter().map(|x| -x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::CrossEntropy { logits, target } => {
                let tl = val(*logits);
                let (m, n) = tl.matrix_dims();
                let scale = g[0] / m as f64;
                let mut gl = vec![0.0; tl.data.len()];
                for i in 0..m {
                    let p = softmax(tl.row(i));
                    let y = &target[i * n..(i + 1) * n];
                    let mass = seq_sum(y);
                    for j in 0..n {
                        gl[i * n + j] = scale * (p[j] * mass - y[j]);
                    }
                }
                vec![(*logits, gl)]
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n) = ta.matrix_dims();
                let mut ga = vec![0.0; ta.data.len()];
                let mut gb = vec![0.0; tb.data.len()];
                for i in 0..m {
                    let (x, y) = (ta.row(i), tb.row(i));
                    let nx = norm(x);
                    let ny = norm(y);
                    let c = out.data[i];
                    for j in 0..n {
                        ga[i * n + j] = g[i] * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        gb[i * n + j] = g[i] * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

/// `[m, k] × [k, n]` with each output summed over `k` in ascending order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn seq_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |s, x| s + x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().fold(0.0, |s, x| s + (x - mx).exp()).ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let s = seq_sum(&e);
    e.into_iter().map(|x| x / s).collect()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |s, v| s + v * v).sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |s, (a, b)| s + a * b)
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let i = g.constant(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn analytic_values() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let n = g.constant(&Tensor::scalar(-1.0)).unwrap();
        let l = g.leaky_relu(n, 0.2).unwrap();
        assert!((g.value(l).data()[0] + 0.2).abs() < 1e-15);
        let zeros = g.constant(&m(&[&[0.0, 0.0, 0.0]])).unwrap();
        let sm = g.softmax_rows(zeros).unwrap();
        for p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected_with_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let bad = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(g.leaf(bad), Err(TensorError::NonFinite { .. })));
        let zero = g.constant(&Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.log(zero), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::zeros(&[2, 3])).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(3.0)).unwrap();
        let sq = g.square(w).unwrap();
        let l = g.mean(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar { .. })));
        assert!(matches!(g.backward(Var(99)), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(2.0)).unwrap();
        let sq = g.square(w).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[8.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn clip_clamps_into_range() {
        let mut p = Tensor::from_rows(&[&[0.5, -0.003, -2.0, 0.0]]).unwrap();
        clip_weights([&mut p], 0.01);
        assert_eq!(p.data(), &[0.01, -0.003, -0.01, 0.0]);
        let mut z = Tensor::zeros(&[3, 3]);
        clip_weights([&mut z], 0.01);
        assert_eq!(z, Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let row = g.constant(&m(&[&[10.0, 20.0]])).unwrap();
        let col = g.constant(&m(&[&[2.0], &[3.0]])).unwrap();
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let p = g.mul(a, col).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 9.0, 12.0]);
        assert!(g.add(a, col).is_err());
        assert!(g.mul(a, row).is_err());
    }

    #[test]
    fn tensor_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
