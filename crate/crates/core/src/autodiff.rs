//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Each operation evaluates eagerly,
//! stores its output and remembers how to push an output gradient back to
//! its inputs. Append order is a topological order, so [`Graph::backward`]
//! walks the tape once in reverse.
//!
//! Parameters enter the graph by reference ([`Graph::param`]) and are never
//! copied. Their gradients come back as a [`Gradients`] value that the
//! caller folds into the parameter's accumulator, which keeps the graph free
//! of mutable borrows and lets independent samples run on separate graphs.
//!
//! A graph is not `Sync`; use one per thread.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{add_assign, check_inner, mm, mm_at, mm_bt, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Softplus(Var),
    Activate(Activation, Var),
    Sum(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => gelu(x),
    }
}

/// Row-wise softmax with max subtraction and explicit renormalization.
/// Entries where `mask` is false get exactly zero weight.
pub fn softmax_rows(data: &[f64], cols: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if cols == 0 {
        return Err(Error::Dimension("softmax over an empty row".into()));
    }
    let mut out = vec![0.0; data.len()];
    for (r, (src, dst)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| src[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(format!("softmax row {r} is fully masked")));
        }
        let mut total = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (src[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrows a tensor into the graph. Gradients are tracked when the
    /// tensor has `requires_grad` set.
    pub fn param(&mut self, tensor: &'p Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(Value::Borrowed(tensor), Op::Leaf, needs_grad)
    }

    /// Adds an owned, untracked value.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Value::Owned(tensor), Op::Leaf, false)
    }

    /// Adds an owned value that gradients should flow into.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(Value::Owned(tensor), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    fn push(&mut self, value: Value<'p>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn emit(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} produced a non-finite value")));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Activate(_, a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _) => self.needs(*a),
            Op::ConcatCols(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(Value::Owned(value), op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_inner(ta.shape(), tb.shape(), "matmul")?;
        let [p, q] = ta.shape();
        let r = tb.cols();
        let out = mm(ta.data(), tb.data(), p, q, r);
        self.emit(p, r, out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::Dimension(format!(
                "matmul_bt: {:?} by transposed {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let [p, q] = ta.shape();
        let r = tb.rows();
        let out = mm_bt(ta.data(), tb.data(), p, q, r);
        self.emit(p, r, out, Op::MatMulBt(a, b), "matmul_bt")
    }

    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{op:?}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Binary(op, a, b), "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let c = ta.cols();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * s).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Scale(a, s), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = ta.data().iter().map(|x| x.ln()).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Log(a), "log")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| softplus(x)).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Softplus(a), "softplus")
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| activate(kind, x)).collect();
        let [r, c] = ta.shape();
        self.emit(r, c, out, Op::Activate(kind, a), "activation")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.emit(1, 1, vec![total], Op::Sum(a), "sum")
    }

    /// Row-wise softmax. `mask` (row-major, `true` = visible) zeroes the
    /// weight of hidden entries; a row with nothing visible is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(Error::Dimension(format!(
                    "softmax mask of length {} for {:?}",
                    m.len(),
                    ta.shape()
                )));
            }
        }
        let [r, c] = ta.shape();
        let out = softmax_rows(ta.data(), c, mask)?;
        self.emit(r, c, out, Op::Softmax(a), "softmax")
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        self.emit(rows, cols, out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.rows() {
            return Err(Error::Index(format!(
                "rows {start}..{} of {}",
                start + len,
                ta.rows()
            )));
        }
        let c = ta.cols();
        let out = ta.data()[start * c..(start + len) * c].to_vec();
        self.emit(len, c, out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Stacks the listed rows of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if ids.is_empty() {
            return Err(Error::Dimension("gather of no rows".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(Error::Index(format!(
                "row {bad} out of range for table with {} rows",
                tt.rows()
            )));
        }
        let c = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tt.row_slice(i));
        }
        self.emit(ids.len(), c, out, Op::Gather(table, ids.to_vec()), "gather")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut sparse: BTreeMap<usize, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads, &mut sparse);
        }

        let mut leaves = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !(node.needs_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let dense = grads[idx].take();
            let rows = sparse.remove(&idx).unwrap_or_default();
            if dense.is_none() && rows.is_empty() {
                continue;
            }
            let t = node.value.tensor();
            leaves.insert(
                Var(idx),
                LeafGrad {
                    shape: t.shape(),
                    dense,
                    rows,
                },
            );
        }
        Ok(Gradients { leaves })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        sparse: &mut BTreeMap<usize, Vec<(usize, Vec<f64>)>>,
    ) {
        let node = &self.nodes[idx];
        let out = node.value.tensor();
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_assign(acc, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [p, q] = ta.shape();
                let r = tb.cols();
                if self.needs(*a) {
                    send(*a, mm_bt(g, tb.data(), p, r, q));
                }
                if self.needs(*b) {
                    send(*b, mm_at(ta.data(), g, p, q, r));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [p, q] = ta.shape();
                let r = tb.rows();
                if self.needs(*a) {
                    send(*a, mm(g, tb.data(), p, r, q));
                }
                if self.needs(*b) {
                    send(*b, mm_at(g, ta.data(), p, r, q));
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match op {
                    BinaryOp::Add => {
                        send(*a, g.to_vec());
                        send(*b, g.to_vec());
                    }
                    BinaryOp::Sub => {
                        send(*a, g.to_vec());
                        send(*b, g.iter().map(|x| -x).collect());
                    }
                    BinaryOp::Mul => {
                        if self.needs(*a) {
                            send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                        }
                        if self.needs(*b) {
                            send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                if self.needs(*row) {
                    let c = out.cols();
                    let mut acc = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        add_assign(&mut acc, chunk);
                    }
                    send(*row, acc);
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect(),
            ),
            Op::Log(a) => send(
                *a,
                g.iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, x)| gi / x)
                    .collect(),
            ),
            Op::Softplus(a) => send(
                *a,
                g.iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, &x)| gi * sigmoid(x))
                    .collect(),
            ),
            Op::Activate(kind, a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                    Activation::Gelu => g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect(),
                };
                send(*a, d);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in out.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let inner: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        dr[j] = y[j] * (gr[j] - inner);
                    }
                }
                send(*a, d);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        send(*p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                send(*a, d);
            }
            Op::Gather(table, ids) => {
                let tt = self.value(*table);
                let c = tt.cols();
                if matches!(self.nodes[table.0].op, Op::Leaf) {
                    // Embedding tables can be large; keep their gradients row-sparse.
                    let entry = sparse.entry(table.0).or_default();
                    for (k, &i) in ids.iter().enumerate() {
                        entry.push((i, g[k * c..(k + 1) * c].to_vec()));
                    }
                } else {
                    let mut d = vec![0.0; tt.len()];
                    for (k, &i) in ids.iter().enumerate() {
                        add_assign(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                    send(*table, d);
                }
            }
        }
    }
}

struct LeafGrad {
    shape: [usize; 2],
    dense: Option<Vec<f64>>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl LeafGrad {
    fn add_into(&self, dst: &mut [f64]) {
        if let Some(d) = &self.dense {
            add_assign(dst, d);
        }
        let c = self.shape[1];
        for (i, row) in &self.rows {
            add_assign(&mut dst[i * c..(i + 1) * c], row);
        }
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves of a graph.
pub struct Gradients {
    leaves: BTreeMap<Var, LeafGrad>,
}

impl Gradients {
    /// Dense gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let leaf = self.leaves.get(&v)?;
        let mut out = vec![0.0; leaf.shape[0] * leaf.shape[1]];
        leaf.add_into(&mut out);
        Some(Tensor::new(leaf.shape[0], leaf.shape[1], out).expect("leaf shape"))
    }

    /// Adds the gradient of `v` into `dst` (row-major, same length as the leaf).
    pub fn add_to(&self, v: Var, dst: &mut [f64]) {
        if let Some(leaf) = self.leaves.get(&v) {
            debug_assert_eq!(dst.len(), leaf.shape[0] * leaf.shape[1]);
            leaf.add_into(dst);
        }
    }

    /// Adds the gradient of `v` into the accumulator of `param`.
    /// Repeated calls sum; clear with [`Tensor::zero_grad`].
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        let Some(leaf) = self.leaves.get(&v) else {
            return Ok(());
        };
        if leaf.shape != param.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for parameter {:?}",
                leaf.shape,
                param.shape()
            )));
        }
        leaf.add_into(param.grad_mut());
        Ok(())
    }
}
