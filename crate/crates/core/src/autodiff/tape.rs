//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every kernel appends one record to the [`Tape`]; records only ever refer
//! to earlier records, so the tape is its own topological order. A backward
//! pass walks the records in reverse and applies each local gradient rule
//! once.
//!
//! Besides trainable leaves ([`Tape::variable`]) the tape can report the
//! gradient at any intermediate that was declared with [`Tape::watch`]
//! before it was consumed. Attention-score perturbations are built from
//! exactly such gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the producing record on its tape.
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    MulCol { a: usize, col: usize },
    Affine { a: usize, scale: f64 },
    Tanh(usize),
    Sigmoid(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    GatherRows { table: usize, ids: Vec<Option<usize>> },
    Sum(usize),
    SumCols(usize),
    Norm(usize),
    Softmax(usize),
    LogClamp { a: usize, lo: f64, hi: f64 },
    Reshape(usize),
    /// `acts` holds, per row, the activated gates `i f g o` followed by `tanh(c)`.
    LstmCell {
        pre: usize,
        bias: usize,
        c_prev: Option<usize>,
        acts: Vec<f64>,
    },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::MulCol { a, col } => vec![*a, *col],
            Op::ConcatCols(parts) => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Affine { a, .. }
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SliceCols { a, .. }
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::Norm(a)
            | Op::Softmax(a)
            | Op::LogClamp { a, .. }
            | Op::Reshape(a) => vec![*a],
            Op::LstmCell { pre, bias, c_prev, .. } => {
                let mut v = vec![*pre, *bias];
                v.extend(c_prev);
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
    watched: bool,
    used: bool,
}

/// Ordered record of executed operations.
///
/// A tape is built for a single forward pass and then discarded.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by the [`Var`] they belong to. Missing entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.remove(&var.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record indices consumed by the record at `index`.
    pub fn operands_of(&self, index: usize) -> Vec<usize> {
        self.nodes[index].op.operands()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
            watched: false,
            used: false,
        });
        Var { tape: self.id, index }
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Declares an intermediate whose gradient the backward pass must report.
    /// Must be called before `v` is used as an operand.
    pub fn watch(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let node = &mut self.nodes[v.index];
        if node.used {
            return Err(Error::WatchAfterUse);
        }
        node.watched = true;
        node.needs_grad = true;
        Ok(v)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let operands = op.operands();
        let mut needs_grad = false;
        for &i in &operands {
            let n = &mut self.nodes[i];
            n.used = true;
            needs_grad |= n.needs_grad;
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
            watched: false,
            used: false,
        });
        Ok(Var { tape: self.id, index })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.rows(), src.cols(), data)?;
        self.push(op_name, value, op)
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.rows(), va.cols(), data)?;
        self.push(op_name, value, op)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let [m, k] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{br}, {bc}] (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, 0.0);
        let value = Tensor::new(m, n, out)?;
        self.push("matmul", value, Op::MatMul { a: a.index, b: b.index, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.index, b.index))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let [r, c] = self.shape(a);
        if self.shape(bias) != [1, c] {
            return Err(shape_err("add_row", format!("[{r}, {c}] + {:?}", self.shape(bias))));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(r, c, data)?;
        self.push("add_row", value, Op::AddRow { a: a.index, bias: bias.index })
    }

    /// Scales row `i` of an `r × c` matrix by entry `i` of an `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check(a)?;
        self.check(col)?;
        let [r, c] = self.shape(a);
        if self.shape(col) != [r, 1] {
            return Err(shape_err("mul_col", format!("[{r}, {c}] * {:?}", self.shape(col))));
        }
        let mut data = self.value(a).data().to_vec();
        let s = self.value(col).data();
        for (i, row) in data.chunks_mut(c.max(1)).enumerate().take(r) {
            row.iter_mut().for_each(|x| *x *= s[i]);
        }
        let value = Tensor::new(r, c, data)?;
        self.push("mul_col", value, Op::MulCol { a: a.index, col: col.index })
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map("affine", a, |x| scale * x + shift, Op::Affine { a: a.index, scale })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a.index))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a.index))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        for &p in parts {
            self.check(p)?;
        }
        let r = self.shape(first)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::new(r, c, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.iter().map(|p| p.index).collect()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let [r, c] = self.shape(a);
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row_slice(i)[start..end]);
        }
        let value = Tensor::new(r, end - start, data)?;
        self.push("slice_cols", value, Op::SliceCols { a: a.index, start })
    }

    /// Row lookup into `table`; `None` ids yield a zero row with no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        self.check(table)?;
        let [n, c] = self.shape(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for id in ids {
            match *id {
                Some(i) if i >= n => {
                    return Err(Error::OutOfRange {
                        what: "embedding table",
                        index: i,
                        len: n,
                    })
                }
                Some(i) => data.extend_from_slice(src.row_slice(i)),
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let value = Tensor::new(ids.len(), c, data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table: table.index,
                ids: ids.to_vec(),
            },
        )
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.index))
    }

    /// Row sums, as an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        let sums = (0..src.rows()).map(|i| src.row_slice(i).iter().sum()).collect();
        self.push("sum_cols", Tensor::column(sums), Op::SumCols(a.index))
    }

    /// Frobenius norm, as a `1 × 1` tensor.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).norm();
        self.push("l2_norm", Tensor::scalar(n), Op::Norm(a.index))
    }

    /// Row-wise softmax. Positions with `mask == false` are left out of the
    /// normalisation and come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        let value = softmax_rows(src, mask)?;
        self.push("softmax", value, Op::Softmax(a.index))
    }

    /// `ln(clamp(a, lo, hi))`, elementwise.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("log", a, |x| x.clamp(lo, hi).ln(), Op::LogClamp { a: a.index, lo, hi })
    }

    /// One LSTM cell update. `pre` holds the `rows × 4h` gate
    /// pre-activations without `bias`, in the order input, forget,
    /// candidate, output. Returns `rows × 2h`: the new hidden state followed
    /// by the new cell state. A missing `c_prev` is a zero state.
    pub fn lstm_cell(&mut self, pre: Var, bias: Var, c_prev: Option<Var>) -> Result<Var> {
        self.check(pre)?;
        self.check(bias)?;
        let [rows, w] = self.shape(pre);
        if w == 0 || w % 4 != 0 || self.shape(bias) != [1, w] {
            return Err(shape_err(
                "lstm_cell",
                format!("pre-activations {rows}×{w} with bias {:?}", self.shape(bias)),
            ));
        }
        let h = w / 4;
        if let Some(c) = c_prev {
            self.check(c)?;
            if self.shape(c) != [rows, h] {
                return Err(shape_err("lstm_cell", format!("cell state {:?}, expected [{rows}, {h}]", self.shape(c))));
            }
        }
        let (pv, bv) = (self.value(pre).data(), self.value(bias).data());
        let cv = c_prev.map(|c| self.value(c).data());
        let mut acts = vec![0.0; rows * 5 * h];
        let mut out = vec![0.0; rows * 2 * h];
        for r in 0..rows {
            let p = &pv[r * w..(r + 1) * w];
            let a = &mut acts[r * 5 * h..(r + 1) * 5 * h];
            let o_row = &mut out[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let i = sigmoid(p[j] + bv[j]);
                let f = sigmoid(p[h + j] + bv[h + j]);
                let g = (p[2 * h + j] + bv[2 * h + j]).tanh();
                let o = sigmoid(p[3 * h + j] + bv[3 * h + j]);
                let c = match cv {
                    Some(cv) => f * cv[r * h + j] + i * g,
                    None => i * g,
                };
                let tc = c.tanh();
                a[j] = i;
                a[h + j] = f;
                a[2 * h + j] = g;
                a[3 * h + j] = o;
                a[4 * h + j] = tc;
                o_row[j] = o * tc;
                o_row[h + j] = c;
            }
        }
        let value = Tensor::new(rows, 2 * h, out)?;
        let op = Op::LstmCell {
            pre: pre.index,
            bias: bias.index,
            c_prev: c_prev.map(|c| c.index),
            acts,
        };
        self.push("lstm_cell", value, op)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshaped(rows, cols)?;
        self.push("reshape", value, Op::Reshape(a.index))
    }

    /// Gradients of `loss` with respect to every [`Tape::variable`] leaf and
    /// every watched intermediate.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let grads = self.run_backward(loss, 0)?;
        let keep = |i: usize| self.nodes[i].trainable || self.nodes[i].watched;
        Ok(self.collect(grads, keep))
    }

    /// Gradients of `loss` with respect to `targets` only.
    ///
    /// Records older than the oldest target cannot lie on a path from a
    /// target to the loss, so they are skipped.
    pub fn gradients_for(&self, loss: Var, targets: &[Var]) -> Result<GradientMap> {
        for &t in targets {
            self.check(t)?;
        }
        let cutoff = targets.iter().map(|t| t.index).min().unwrap_or(0);
        let grads = self.run_backward(loss, cutoff)?;
        Ok(self.collect(grads, |i| targets.iter().any(|t| t.index == i)))
    }

    fn collect(&self, grads: Vec<Option<Vec<f64>>>, keep: impl Fn(usize) -> bool) -> GradientMap {
        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if keep(i) {
                    let v = &self.nodes[i].value;
                    map.insert(i, Tensor::new(v.rows(), v.cols(), g).expect("gradient shape"));
                }
            }
        }
        GradientMap { tape: self.id, grads: map }
    }

    fn run_backward(&self, loss: Var, cutoff: usize) -> Result<Vec<Option<Vec<f64>>>> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        if !self.nodes[loss.index].needs_grad {
            return Ok(grads);
        }
        grads[loss.index] = Some(vec![1.0]);
        for i in (cutoff..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, cutoff);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn wants(&self, j: usize, cutoff: usize) -> bool {
        j >= cutoff && self.nodes[j].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], cutoff: usize) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let [m, k] = val(a).shape();
                let n = out.cols();
                if self.wants(a, cutoff) {
                    // dA = G · op(B)ᵀ
                    let s = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, val(b).data(), !trans_b, s, 1.0);
                }
                if self.wants(b, cutoff) {
                    let s = slot(grads, b, k * n);
                    if trans_b {
                        // dB (n × k) = Gᵀ · A
                        gemm(n, m, k, g, true, val(a).data(), false, s, 1.0);
                    } else {
                        // dB (k × n) = Aᵀ · G
                        gemm(k, m, n, val(a).data(), true, g, false, s, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (j, sign) in [(a, 1.0), (b, 1.0)] {
                    if self.wants(j, cutoff) {
                        axpy(slot(grads, j, g.len()), sign, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, sign) in [(a, 1.0), (b, -1.0)] {
                    if self.wants(j, cutoff) {
                        axpy(slot(grads, j, g.len()), sign, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (j, other) in [(a, b), (b, a)] {
                    if self.wants(j, cutoff) {
                        let o = val(other).data();
                        let s = slot(grads, j, g.len());
                        for ((d, &gi), &oi) in s.iter_mut().zip(g).zip(o) {
                            *d += gi * oi;
                        }
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if self.wants(a, cutoff) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
                if self.wants(bias, cutoff) {
                    let c = out.cols();
                    let s = slot(grads, bias, c);
                    for row in g.chunks(c.max(1)) {
                        axpy(s, 1.0, row);
                    }
                }
            }
            &Op::MulCol { a, col } => {
                let c = out.cols().max(1);
                if self.wants(a, cutoff) {
                    let sc = val(col).data();
                    let s = slot(grads, a, g.len());
                    for (r, (srow, grow)) in s.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        axpy(srow, sc[r], grow);
                    }
                }
                if self.wants(col, cutoff) {
                    let av = val(a).data();
                    let s = slot(grads, col, out.rows());
                    for (r, (arow, grow)) in av.chunks(c).zip(g.chunks(c)).enumerate() {
                        s[r] += dot(arow, grow);
                    }
                }
            }
            &Op::Affine { a, scale } => {
                if self.wants(a, cutoff) {
                    axpy(slot(grads, a, g.len()), scale, g);
                }
            }
            &Op::Tanh(a) => {
                if self.wants(a, cutoff) {
                    let s = slot(grads, a, g.len());
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.wants(a, cutoff) {
                    let s = slot(grads, a, g.len());
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.wants(p, cutoff) {
                        let s = slot(grads, p, out.rows() * w);
                        for r in 0..out.rows() {
                            axpy(&mut s[r * w..(r + 1) * w], 1.0, &g[r * c + offset..r * c + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { a, start } => {
                if self.wants(a, cutoff) {
                    let ca = val(a).cols();
                    let w = out.cols();
                    let s = slot(grads, a, val(a).len());
                    for r in 0..out.rows() {
                        axpy(&mut s[r * ca + start..r * ca + start + w], 1.0, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                if self.wants(table, cutoff) {
                    let c = out.cols();
                    let s = slot(grads, table, val(table).len());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(t) = *id {
                            axpy(&mut s[t * c..(t + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a, cutoff) {
                    let s = slot(grads, a, val(a).len());
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::SumCols(a) => {
                if self.wants(a, cutoff) {
                    let c = val(a).cols().max(1);
                    let s = slot(grads, a, val(a).len());
                    for (row, &gi) in s.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            &Op::Norm(a) => {
                if self.wants(a, cutoff) {
                    let n = out.item();
                    if n > 0.0 {
                        axpy(slot(grads, a, val(a).len()), g[0] / n, val(a).data());
                    }
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a, cutoff) {
                    let c = out.cols().max(1);
                    let s = slot(grads, a, g.len());
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let inner = dot(yrow, grow);
                        for ((d, &y), &gi) in srow.iter_mut().zip(yrow).zip(grow) {
                            *d += y * (gi - inner);
                        }
                    }
                }
            }
            &Op::LogClamp { a, lo, hi } => {
                if self.wants(a, cutoff) {
                    let s = slot(grads, a, g.len());
                    for ((d, &gi), &x) in s.iter_mut().zip(g).zip(val(a).data()) {
                        if (lo..=hi).contains(&x) {
                            *d += gi / x;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a, cutoff) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
            }
            Op::LstmCell { pre, bias, c_prev, acts } => {
                let (pre, bias, c_prev) = (*pre, *bias, *c_prev);
                let rows = out.rows();
                let h = out.cols() / 2;
                let w = 4 * h;
                // Gradient with respect to the biased pre-activations.
                let mut dpre = vec![0.0; rows * w];
                let mut dc_prev = c_prev.map(|_| vec![0.0; rows * h]);
                let cv = c_prev.map(|c| val(c).data());
                for r in 0..rows {
                    let a = &acts[r * 5 * h..(r + 1) * 5 * h];
                    let gr = &g[r * 2 * h..(r + 1) * 2 * h];
                    let d = &mut dpre[r * w..(r + 1) * w];
                    for j in 0..h {
                        let (i, f, gg, o, tc) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[4 * h + j]);
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * o * (1.0 - tc * tc);
                        let cp = cv.map_or(0.0, |cv| cv[r * h + j]);
                        d[j] = dc * gg * i * (1.0 - i);
                        d[h + j] = dc * cp * f * (1.0 - f);
                        d[2 * h + j] = dc * i * (1.0 - gg * gg);
                        d[3 * h + j] = dh * tc * o * (1.0 - o);
                        if let Some(dcp) = dc_prev.as_mut() {
                            dcp[r * h + j] = dc * f;
                        }
                    }
                }
                if self.wants(bias, cutoff) {
                    let s = slot(grads, bias, w);
                    for row in dpre.chunks(w) {
                        axpy(s, 1.0, row);
                    }
                }
                if let (Some(c), Some(dcp)) = (c_prev, dc_prev) {
                    if self.wants(c, cutoff) {
                        axpy(slot(grads, c, dcp.len()), 1.0, &dcp);
                    }
                }
                if self.wants(pre, cutoff) {
                    axpy(slot(grads, pre, dpre.len()), 1.0, &dpre);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut [f64] {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked, max-shifted softmax over each row of `src`.
pub fn softmax_rows(src: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let [r, c] = src.shape();
    if c == 0 || r == 0 {
        return Err(Error::Empty("softmax"));
    }
    if let Some(m) = mask {
        if m.len() != src.len() {
            return Err(shape_err("softmax", format!("mask of {} for {:?}", m.len(), src.shape())));
        }
    }
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let mut out = vec![0.0; r * c];
    for row in 0..r {
        let base = row * c;
        let xs = src.row_slice(row);
        let mut max = f64::NEG_INFINITY;
        for (k, &x) in xs.iter().enumerate() {
            if valid(base + k) && x > max {
                max = x;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::NoValidPositions);
        }
        let mut total = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            if valid(base + k) {
                let e = (x - max).exp();
                out[base + k] = e;
                total += e;
            }
        }
        out[base..base + c].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(r, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x*x + 3x  ->  f' = 2x + 3
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let f = tape.add(sq, lin).unwrap();
        assert_eq!(tape.backward(f).unwrap().get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.variable(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss([1, 2]))));
    }

    #[test]
    fn watch_after_use_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let _ = tape.tanh(x).unwrap();
        assert!(matches!(tape.watch(x), Err(Error::WatchAfterUse)));
    }

    #[test]
    fn watched_intermediate_reports_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        let y = tape.watch(y).unwrap();
        let z = tape.mul(y, y).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[4.0, 8.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn records_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![0.5, -0.5]));
        let w = tape.variable(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let t = tape.tanh(h).unwrap();
        let _ = tape.sum(t).unwrap();
        for i in 0..tape.len() {
            assert!(tape.operands_of(i).iter().all(|&j| j < i));
        }
    }

    #[test]
    fn partial_backward_matches_full() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::row(vec![0.3, -0.2, 0.9]));
        let h = tape.tanh(w).unwrap();
        let h = tape.watch(h).unwrap();
        let p = tape.softmax_rows(h, None).unwrap();
        let l = tape.log_clamped(p, 1e-12, 1.0).unwrap();
        let s = tape.sum(l).unwrap();
        let full = tape.backward(s).unwrap();
        let part = tape.gradients_for(s, &[h]).unwrap();
        assert_eq!(full.get(h), part.get(h));
        assert!(part.get(w).is_none());
    }

    fn lstm_reference(pre: &[f64], bias: &[f64], c_prev: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let rows = pre.len() / (4 * h);
        let (mut hs, mut cs) = (Vec::new(), Vec::new());
        for r in 0..rows {
            let z = |k: usize, j: usize| pre[r * 4 * h + k * h + j] + bias[k * h + j];
            for j in 0..h {
                let c = s(z(1, j)) * c_prev[r * h + j] + s(z(0, j)) * z(2, j).tanh();
                hs.push(s(z(3, j)) * c.tanh());
                cs.push(c);
            }
        }
        (hs, cs)
    }

    #[test]
    fn lstm_cell_matches_the_gate_equations_and_its_gradient() {
        let h = 3;
        let pre: Vec<f64> = (0..2 * 4 * h).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let bias: Vec<f64> = (0..4 * h).map(|i| (i as f64 - 6.0) * 0.1).collect();
        let c_prev: Vec<f64> = (0..2 * h).map(|i| (i as f64 - 2.5) * 0.4).collect();
        let (want_h, want_c) = lstm_reference(&pre, &bias, &c_prev, h);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(2, 4 * h, pre.clone()).unwrap());
        let b = tape.constant(Tensor::row(bias.clone()));
        let c = tape.constant(Tensor::new(2, h, c_prev.clone()).unwrap());
        let out = tape.lstm_cell(p, b, Some(c)).unwrap();
        let v = tape.value(out);
        for r in 0..2 {
            for j in 0..h {
                assert!((v.get(r, j) - want_h[r * h + j]).abs() < 1e-14);
                assert!((v.get(r, h + j) - want_c[r * h + j]).abs() < 1e-14);
            }
        }
        let zero = tape.lstm_cell(p, b, None).unwrap();
        let (zh, _) = lstm_reference(&pre, &bias, &[0.0; 6], h);
        assert!((tape.value(zero).get(1, 2) - zh[5]).abs() < 1e-14);

        // Every input gets a finite-difference checked gradient through a
        // weighted sum of both outputs.
        let weights = Tensor::new(2, 2 * h, (0..4 * h).map(|i| 1.0 + 0.25 * i as f64).collect()).unwrap();
        let loss = |tape: &mut Tape, out: Var| -> Result<Var> {
            let w = tape.constant(weights.clone());
            let m = tape.mul(out, w)?;
            tape.sum(m)
        };
        let (bt, ct) = (Tensor::row(bias.clone()), Tensor::new(2, h, c_prev.clone()).unwrap());
        let pt = Tensor::new(2, 4 * h, pre.clone()).unwrap();
        let err = crate::autodiff::grad_check(
            |t, x| {
                let (b, c) = (t.constant(bt.clone()), t.constant(ct.clone()));
                let out = t.lstm_cell(x, b, Some(c))?;
                loss(t, out)
            },
            &pt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "pre {err}");
        let err = crate::autodiff::grad_check(
            |t, x| {
                let (p, c) = (t.constant(pt.clone()), t.constant(ct.clone()));
                let out = t.lstm_cell(p, x, Some(c))?;
                loss(t, out)
            },
            &bt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bias {err}");
        let err = crate::autodiff::grad_check(
            |t, x| {
                let (p, b) = (t.constant(pt.clone()), t.constant(bt.clone()));
                let out = t.lstm_cell(p, b, Some(x))?;
                loss(t, out)
            },
            &ct,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "cell {err}");
        assert!(tape.lstm_cell(p, c, None).is_err());
    }
}
