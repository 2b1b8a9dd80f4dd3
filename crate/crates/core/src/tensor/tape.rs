//! Reverse-mode differentiation over a linear tape of recorded primitives.
//!
//! Every operation appends a node holding its forward value. Nodes only refer
//! to earlier nodes, so the tape is always in topological order and the
//! backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use super::array::Array;
use super::kernels::{self, axis_split};
use crate::error::{Error, Result};
use crate::exec::Exec;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[n×d] + [d]`
    AddRowVector(Var, Var),
    /// `[n×d] ⊙ [n]` broadcast along rows
    MulColVector(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    LogSumExpAxis(Var, usize),
    LogSoftmaxRows(Var, f64),
    RowL2Normalize(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    SliceRows(Var, usize, usize),
    StopGradient(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRowVector(a, b)
            | MulColVector(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a, _) | Exp(a) | Log(a) | Relu(a) | Gelu(a)
            | Transpose(a) | Sum(a) | SumAxis(a, _) | LogSumExpAxis(a, _)
            | LogSoftmaxRows(a, _) | RowL2Normalize(a) | Reshape(a) | SliceRows(a, _, _)
            | StopGradient(a) => vec![*a],
            Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    leaves: Vec<Var>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        let v = self.push_raw(value, Op::Leaf, true);
        self.leaves.push(v);
        v
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.index()].value
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index() < self.nodes.len()
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::Graph(format!("node {v:?} is not on tape {}", self.id)))
        }
    }

    fn push_raw(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        let v = Var {
            tape: self.id,
            idx: self.nodes.len() as u32,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        v
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check(v)?;
        }
        let value = self.forward(&op)?;
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add_row_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        self.record(Op::AddRowVector(a, v))
    }

    pub fn mul_col_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        self.record(Op::MulColVector(a, v))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn logsumexp_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::LogSumExpAxis(a, axis))
    }

    /// Row-wise `log softmax(a / temperature)`. Entries equal to `-inf` are
    /// masked and come out as `-inf`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.record(Op::LogSoftmaxRows(a, temperature))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.record(Op::RowL2Normalize(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        self.record(Op::Concat(parts.to_vec(), axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshaped(shape)?;
        let requires_grad = self.nodes[a.index()].requires_grad;
        Ok(self.push_raw(value, Op::Reshape(a), requires_grad))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows(a, start, len))
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.record(Op::StopGradient(a))
    }

    fn val(&self, v: Var) -> &Array {
        &self.nodes[v.index()].value
    }

    fn forward(&self, op: &Op) -> Result<Array> {
        use Op::*;
        Ok(match op {
            Leaf | Constant => unreachable!("leaves carry their own values"),
            Add(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x + y)?,
            Sub(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x - y)?,
            Mul(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x * y)?,
            Scale(a, s) => self.val(*a).map(|x| x * s),
            AddScalar(a, s) => self.val(*a).map(|x| x + s),
            Exp(a) => self.val(*a).map(f64::exp),
            Log(a) => self.val(*a).map(f64::ln),
            Relu(a) => self.val(*a).map(|x| x.max(0.0)),
            Gelu(a) => self.val(*a).map(kernels::gelu),
            MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(
                        "matmul",
                        format!("{:?} · {:?}", a.shape(), b.shape()),
                    ));
                }
                let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Array::new(
                    vec![p, r],
                    kernels::matmul(a.data(), b.data(), p, q, r, self.exec),
                )?
            }
            Transpose(a) => {
                let a = self.val(*a);
                if a.ndim() != 2 {
                    return Err(Error::shape("transpose", format!("{:?}", a.shape())));
                }
                a.transpose2()
            }
            AddRowVector(a, v) => {
                let (a, v) = (self.val(*a), self.val(*v));
                if a.ndim() != 2 || v.ndim() != 1 || a.shape()[1] != v.len() {
                    return Err(Error::shape(
                        "add_row_vector",
                        format!("{:?} + {:?}", a.shape(), v.shape()),
                    ));
                }
                let mut out = a.clone();
                let w = v.len();
                for row in out.data_mut().chunks_mut(w) {
                    for (o, &x) in row.iter_mut().zip(v.data()) {
                        *o += x;
                    }
                }
                out
            }
            MulColVector(a, v) => {
                let (a, v) = (self.val(*a), self.val(*v));
                if a.ndim() != 2 || v.ndim() != 1 || a.shape()[0] != v.len() {
                    return Err(Error::shape(
                        "mul_col_vector",
                        format!("{:?} * {:?}", a.shape(), v.shape()),
                    ));
                }
                let mut out = a.clone();
                let w = a.shape()[1];
                if w > 0 {
                    for (row, &s) in out.data_mut().chunks_mut(w).zip(v.data()) {
                        row.iter_mut().for_each(|o| *o *= s);
                    }
                }
                out
            }
            Sum(a) => Array::scalar(self.val(*a).data().iter().sum()),
            SumAxis(a, axis) => {
                let a = self.val(*a);
                check_axis("sum_axis", a, *axis)?;
                let (outer, n, inner) = axis_split(a.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += a.data()[base + i];
                        }
                    }
                }
                Array::new(removed_axis(a.shape(), *axis), out)?
            }
            LogSumExpAxis(a, axis) => {
                let a = self.val(*a);
                check_axis("logsumexp_axis", a, *axis)?;
                let (outer, n, inner) = axis_split(a.shape(), *axis);
                let d = a.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let it = (0..n).map(|k| d[(o * n + k) * inner + i]);
                        out[o * inner + i] = kernels::logsumexp(it);
                    }
                }
                Array::new(removed_axis(a.shape(), *axis), out)?
            }
            LogSoftmaxRows(a, t) => log_softmax_rows(self.val(*a), *t)?,
            RowL2Normalize(a) => {
                let a = self.val(*a);
                let mut out = a.clone();
                let w = a.cols();
                for (r, row) in out.data_mut().chunks_mut(w.max(1)).enumerate() {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if !(norm >= 1e-12) {
                        return Err(Error::Degenerate {
                            op: "row_l2_normalize",
                            row: r,
                            norm,
                        });
                    }
                    row.iter_mut().for_each(|x| *x /= norm);
                }
                out
            }
            Concat(parts, axis) => {
                let arrays: Vec<&Array> = parts.iter().map(|v| self.val(*v)).collect();
                concat(&arrays, *axis)?
            }
            Reshape(_) => unreachable!("reshape values are built in Tape::reshape"),
            SliceRows(a, start, len) => {
                let a = self.val(*a);
                if a.ndim() == 0 || start + len > a.rows() {
                    return Err(Error::shape(
                        "slice_rows",
                        format!("rows {start}..{} of {:?}", start + len, a.shape()),
                    ));
                }
                a.slice_rows(*start, *len)
            }
            StopGradient(a) => self.val(*a).clone(),
        })
    }

    /// Recomputes every derived node from the current leaf and constant
    /// values. With unchanged leaves the result is bit-identical.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Reshape(a) => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    self.nodes[i].value = self.nodes[a.index()].value.clone().reshaped(&shape)?;
                }
                _ => self.nodes[i].value = self.forward(&op)?,
            }
        }
        Ok(())
    }

    /// Overwrites the value of a leaf (shape must match). Call [`Tape::replay`]
    /// afterwards to refresh derived values.
    pub fn set_leaf(&mut self, v: Var, value: Array) -> Result<()> {
        self.check(v)?;
        let node = &mut self.nodes[v.index()];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(Error::Graph(format!("node {} is not an input", v.index())));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    pub fn leaf_value_mut(&mut self, v: Var) -> Result<&mut Array> {
        self.check(v)?;
        Ok(&mut self.nodes[v.index()].value)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if !self.val(root).shape().is_empty() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.index() + 1];
        grads[root.index()] = Some(Array::scalar(1.0));

        for i in (0..=root.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        use Op::*;
        let mut acc = |v: Var, d: Array| accumulate(grads, self, v, d);
        match &node.op {
            Leaf | Constant => {}
            Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Mul(a, b) => {
                acc(*a, g.zip_map(self.val(*b), |g, y| g * y)?);
                acc(*b, g.zip_map(self.val(*a), |g, x| g * x)?);
            }
            Scale(a, s) => acc(*a, g.map(|x| x * s)),
            AddScalar(a, _) => acc(*a, g.clone()),
            Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)?),
            Log(a) => acc(*a, g.zip_map(self.val(*a), |g, x| g / x)?),
            Relu(a) => acc(
                *a,
                g.zip_map(self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
            ),
            Gelu(a) => acc(*a, g.zip_map(self.val(*a), |g, x| g * kernels::gelu_grad(x))?),
            MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (p, q, r) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let da = kernels::matmul_nt(g.data(), bv.data(), p, q, r, self.exec);
                    acc(*a, Array::new(vec![p, q], da)?);
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(av.data(), g.data(), p, q, r, self.exec);
                    acc(*b, Array::new(vec![q, r], db)?);
                }
            }
            Transpose(a) => acc(*a, g.transpose2()),
            AddRowVector(a, v) => {
                acc(*a, g.clone());
                if self.needs(*v) {
                    let w = self.val(*v).len();
                    let mut dv = vec![0.0; w];
                    for row in g.data().chunks(w.max(1)) {
                        for (d, &x) in dv.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*v, Array::vector(dv));
                }
            }
            MulColVector(a, v) => {
                let (av, vv) = (self.val(*a), self.val(*v));
                let w = av.shape()[1];
                if self.needs(*a) {
                    let mut da = g.clone();
                    if w > 0 {
                        for (row, &s) in da.data_mut().chunks_mut(w).zip(vv.data()) {
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*v) {
                    let dv = (0..vv.len())
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(av.row(r))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    acc(*v, Array::vector(dv));
                }
            }
            Sum(a) => acc(*a, Array::full(self.val(*a).shape(), g.item())),
            SumAxis(a, axis) => {
                let shape = self.val(*a).shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        d[base..base + inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, Array::new(shape.to_vec(), d)?);
            }
            LogSumExpAxis(a, axis) => {
                let av = self.val(*a);
                let (outer, n, inner) = axis_split(av.shape(), *axis);
                let mut d = vec![0.0; av.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = node.value.data()[o * inner + i];
                        let gi = g.data()[o * inner + i];
                        for k in 0..n {
                            let idx = (o * n + k) * inner + i;
                            let x = av.data()[idx];
                            if x != f64::NEG_INFINITY {
                                d[idx] = gi * (x - lse).exp();
                            }
                        }
                    }
                }
                acc(*a, Array::new(av.shape().to_vec(), d)?);
            }
            LogSoftmaxRows(a, t) => {
                let w = node.value.cols();
                let mut d = vec![0.0; node.value.len()];
                for (r, drow) in d.chunks_mut(w.max(1)).enumerate() {
                    let y = node.value.row(r);
                    let gr = g.row(r);
                    let gsum: f64 = gr
                        .iter()
                        .zip(y)
                        .filter(|(_, &yv)| yv != f64::NEG_INFINITY)
                        .map(|(gv, _)| gv)
                        .sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(gr).zip(y) {
                        if yv != f64::NEG_INFINITY {
                            *dv = (gv - yv.exp() * gsum) / t;
                        }
                    }
                }
                acc(*a, Array::new(node.value.shape().to_vec(), d)?);
            }
            RowL2Normalize(a) => {
                let av = self.val(*a);
                let w = av.cols();
                let mut d = vec![0.0; av.len()];
                for (r, drow) in d.chunks_mut(w.max(1)).enumerate() {
                    let x = av.row(r);
                    let y = node.value.row(r);
                    let gr = g.row(r);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(gr).zip(y) {
                        *dv = (gv - yv * yg) / norm;
                    }
                }
                acc(*a, Array::new(av.shape().to_vec(), d)?);
            }
            Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let total_n = g.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let n = pv.shape()[*axis];
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            let start = (o * total_n + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + n * inner]);
                        }
                        acc(*p, Array::new(pv.shape().to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            Reshape(a) => acc(*a, g.clone().reshaped(self.val(*a).shape())?),
            SliceRows(a, start, len) => {
                let av = self.val(*a);
                let w = av.cols();
                let mut d = vec![0.0; av.len()];
                d[start * w..(start + len) * w].copy_from_slice(g.data());
                acc(*a, Array::new(av.shape().to_vec(), d)?);
            }
            StopGradient(_) => {}
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Array>], tape: &Tape, v: Var, d: Array) {
    if !tape.needs(v) {
        return;
    }
    match &mut grads[v.index()] {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn check_axis(op: &'static str, a: &Array, axis: usize) -> Result<()> {
    if axis >= a.ndim() {
        return Err(Error::shape(op, format!("axis {axis} of {:?}", a.shape())));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect()
}

/// Row-wise masked log-softmax on a plain array.
pub fn log_softmax_rows(a: &Array, temperature: f64) -> Result<Array> {
    if a.ndim() != 2 {
        return Err(Error::shape("log_softmax_rows", format!("{:?}", a.shape())));
    }
    let mut out = a.clone();
    let w = a.cols();
    for (r, row) in out.data_mut().chunks_mut(w.max(1)).enumerate() {
        row.iter_mut().for_each(|x| *x /= temperature);
        let lse = kernels::logsumexp(row.iter().copied());
        if lse == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { group: r });
        }
        if !lse.is_finite() {
            return Err(Error::NonFinite(format!("log_softmax_rows row {r}")));
        }
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Ok(out)
}

pub fn concat(arrays: &[&Array], axis: usize) -> Result<Array> {
    let first = arrays[0].shape();
    if axis >= first.len() {
        return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
    }
    let mut shape = first.to_vec();
    shape[axis] = 0;
    for a in arrays {
        let s = a.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
        }
        shape[axis] += s[axis];
    }
    let (outer, _, inner) = axis_split(first, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for a in arrays {
            let n = a.shape()[axis];
            data.extend_from_slice(&a.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    Array::new(shape, data)
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` does not influence the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Result<Array> {
        if v.tape != self.tape || !tape.contains(v) {
            return Err(Error::Graph(format!("node {v:?} is not on this tape")));
        }
        Ok(self
            .grads
            .get(v.index())
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape())))
    }

    /// Gradient for every leaf, in leaf-creation order.
    pub fn leaf_map(&self, tape: &Tape) -> Vec<(Var, Array)> {
        tape.leaves()
            .iter()
            .map(|&v| (v, self.get(tape, v).expect("leaf is on tape")))
            .collect()
    }
}
