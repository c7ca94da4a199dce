//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Inputs always precede outputs, so
//! the backward sweep is a single reverse pass over the node list.
//!
//! A tape lives for one forward pass. [`Tape::backward`] consumes it: a
//! second call returns [`TensorError::TapeConsumed`].
//!
//! Broadcasting is restricted to scalar-with-tensor in the elementwise ops.
//! Row-wise bias and scale have their own explicit ops ([`Tape::add_row`],
//! [`Tape::mul_row`]).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Reduction applied by [`Tape::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

const NO_ARGMAX: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, Vec<f64>),
    Neg(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Clip(usize, f64, f64),
    Matmul(usize, usize),
    Segment {
        input: usize,
        segments: Vec<usize>,
        mode: Reduce,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    PickPerRow(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    BatchNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Output shape for a binary elementwise op with scalar broadcasting.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

#[inline]
fn bval(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

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
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (ta, tb) = (self.val(ia), self.val(ib));
        let shape = broadcast_shape(op, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(bval(ta, i), bval(tb, i))).collect();
        let needs = self.ng(ia) || self.ng(ib);
        Ok(self.push(Tensor::new(shape, data)?, make(ia, ib), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum)
    }

    fn row_check(&self, op: &'static str, ix: usize, ir: usize) -> Result<()> {
        let (x, r) = (self.val(ix), self.val(ir));
        if x.shape().len() != 2 || r.numel() != x.cols() {
            return Err(TensorError::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `x[n×d] + row[d]`, row repeated over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x), self.idx(row));
        self.row_check("add_row", ix, ir)?;
        let (tx, tr) = (self.val(ix), self.val(ir));
        let d = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(ix) || self.ng(ir);
        Ok(self.push(out, Op::AddRow(ix, ir), needs))
    }

    /// `x[n×d] * row[d]`, row repeated over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x), self.idx(row));
        self.row_check("mul_row", ix, ir)?;
        let (tx, tr) = (self.val(ix), self.val(ir));
        let d = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tr.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(ix) || self.ng(ir);
        Ok(self.push(out, Op::MulRow(ix, ir), needs))
    }

    /// Multiplies row `i` of `x` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        let ix = self.idx(x);
        let tx = self.val(ix);
        if coeffs.len() != tx.rows() {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![coeffs.len()],
            });
        }
        let d = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * coeffs[i / d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(ix);
        Ok(self.push(out, Op::ScaleRows(ix, coeffs), needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, make: impl FnOnce(usize) -> Op) -> Var {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(ix);
        self.push(out, make(ix), needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        if let Some((index, &value)) = self
            .val(ix)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v <= 0.0)
        {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the input lies outside.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), |i| Op::Clip(i, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Matmul(ia, ib), needs))
    }

    /// Reduces the rows of `x` by segment id. Empty segments give zero rows.
    /// For `Max`, ties go to the lowest row index.
    pub fn segment_reduce(
        &mut self,
        x: Var,
        segments: &[usize],
        num_segments: usize,
        mode: Reduce,
    ) -> Result<Var> {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let (n, d) = (tx.rows(), tx.cols());
        if segments.len() != n {
            return Err(TensorError::Shape {
                op: "segment_reduce",
                lhs: tx.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::Index {
                op: "segment_reduce",
                index: bad,
                len: num_segments,
            });
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segments {
            counts[s] += 1;
        }
        let mut out = vec![0.0; num_segments * d];
        let mut argmax = Vec::new();
        match mode {
            Reduce::Sum | Reduce::Mean => {
                // each segment's column is summed in sorted order, so the
                // result does not depend on the order of the rows
                let mut members = vec![Vec::new(); num_segments];
                for (i, &s) in segments.iter().enumerate() {
                    members[s].push(i);
                }
                let src = tx.data();
                let mut column = Vec::new();
                for (s, rows) in members.iter().enumerate() {
                    for j in 0..d {
                        column.clear();
                        column.extend(rows.iter().map(|&i| src[i * d + j]));
                        column.sort_by(f64::total_cmp);
                        out[s * d + j] = column.iter().sum();
                    }
                }
                if mode == Reduce::Mean {
                    for (s, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            out[s * d..(s + 1) * d]
                                .iter_mut()
                                .for_each(|o| *o /= c as f64);
                        }
                    }
                }
            }
            Reduce::Max => {
                argmax = vec![NO_ARGMAX; num_segments * d];
                for (i, &s) in segments.iter().enumerate() {
                    let src = tx.row(i);
                    for j in 0..d {
                        let slot = s * d + j;
                        if argmax[slot] == NO_ARGMAX || src[j] > out[slot] {
                            out[slot] = src[j];
                            argmax[slot] = i;
                        }
                    }
                }
            }
        }
        let shape = if tx.shape().len() == 1 {
            vec![num_segments]
        } else {
            vec![num_segments, d]
        };
        let out = Tensor::new(shape, out)?;
        let needs = self.ng(ix);
        Ok(self.push(
            out,
            Op::Segment {
                input: ix,
                segments: segments.to_vec(),
                mode,
                counts,
                argmax,
            },
            needs,
        ))
    }

    /// Selects rows `indices` of `x` (repetition allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(tx.row(r));
        }
        let shape = if tx.shape().len() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), d]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.ng(ix);
        Ok(self.push(out, Op::GatherRows(ix, indices.to_vec()), needs))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let rows = self.val(ids[0]).rows();
        for &i in &ids {
            if self.val(i).rows() != rows || self.val(i).shape().len() != 2 {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.val(ids[0]).shape().to_vec(),
                    rhs: self.val(i).shape().to_vec(),
                });
            }
        }
        let total: usize = ids.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let needs = ids.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatCols(ids), needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let (n, k) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; n * k];
        for r in 0..n {
            softmax_row(tx.row(r), &mut data[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(ix);
        self.push(out, Op::SoftmaxRows(ix), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let (n, k) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; n * k];
        for r in 0..n {
            let row = tx.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in data[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(ix);
        self.push(out, Op::LogSoftmaxRows(ix), needs)
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let tx = self.val(ix);
        let (n, k) = (tx.rows(), tx.cols());
        if cols.len() != n {
            return Err(TensorError::Shape {
                op: "pick_per_row",
                lhs: tx.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(n);
        for (r, &c) in cols.iter().enumerate() {
            if c >= k {
                return Err(TensorError::Index {
                    op: "pick_per_row",
                    index: c,
                    len: k,
                });
            }
            data.push(tx.data()[r * k + c]);
        }
        let needs = self.ng(ix);
        Ok(self.push(Tensor::vector(data), Op::PickPerRow(ix, cols.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let s = self.val(ix).data().iter().sum();
        let needs = self.ng(ix);
        self.push(Tensor::scalar(s), Op::Sum(ix), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let t = self.val(ix);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let needs = self.ng(ix);
        self.push(Tensor::scalar(s), Op::Mean(ix), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.idx(x);
        let out = self.val(ix).clone().reshaped(shape)?;
        let needs = self.ng(ix);
        Ok(self.push(out, Op::Reshape(ix), needs))
    }

    /// Normalizes each column of `x` by its batch mean and biased variance.
    /// Returns the normalized values and the statistics used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let ix = self.idx(x);
        let tx = self.val(ix);
        if tx.shape().len() != 2 || tx.rows() == 0 {
            return Err(TensorError::Shape {
                op: "batch_norm",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(tx.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, v) in tx.row(r).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % d]) * inv_std[i % d])
            .collect();
        let out = Tensor::new(vec![n, d], data)?;
        let needs = self.ng(ix);
        let v = self.push(out, Op::BatchNorm { input: ix, inv_std }, needs);
        Ok((v, BatchStats { mean, var }))
    }

    /// Propagates d`loss`/d(node) back to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        let root = loss.idx;
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[root].value.shape().to_vec(),
            ));
        }
        self.consumed = true;
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.needs_grad)
            .collect::<Vec<_>>();
        for (i, is_leaf) in leaves.iter().enumerate() {
            if !is_leaf {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            sizes,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |target: usize, contrib: Vec<f64>| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Reduces a broadcast gradient back onto a (possibly scalar) input.
        let fit = |target: usize, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[target].value.numel() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, fit(*a, g.to_vec()));
                acc(*b, fit(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, fit(*a, g.to_vec()));
                acc(*b, fit(*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    let ga = g.iter().enumerate().map(|(k, v)| v * bval(tb, k)).collect();
                    acc(*a, fit(*a, ga));
                }
                if self.ng(*b) {
                    let gb = g.iter().enumerate().map(|(k, v)| v * bval(ta, k)).collect();
                    acc(*b, fit(*b, gb));
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for k in 0..g.len() {
                    if bval(ta, k) <= bval(tb, k) {
                        ga[k] = g[k];
                    } else {
                        gb[k] = g[k];
                    }
                }
                acc(*a, fit(*a, ga));
                acc(*b, fit(*b, gb));
            }
            Op::AddRow(x, r) => {
                let d = out.cols();
                acc(*x, g.to_vec());
                if self.ng(*r) {
                    let mut gr = vec![0.0; d];
                    g.iter().enumerate().for_each(|(k, v)| gr[k % d] += v);
                    acc(*r, gr);
                }
            }
            Op::MulRow(x, r) => {
                let d = out.cols();
                let (tx, tr) = (self.val(*x), self.val(*r));
                if self.ng(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * tr.data()[k % d])
                        .collect();
                    acc(*x, gx);
                }
                if self.ng(*r) {
                    let mut gr = vec![0.0; d];
                    g.iter()
                        .zip(tx.data())
                        .enumerate()
                        .for_each(|(k, (v, xv))| gr[k % d] += v * xv);
                    acc(*r, gr);
                }
            }
            Op::ScaleRows(x, c) => {
                let d = out.cols();
                acc(*x, g.iter().enumerate().map(|(k, v)| v * c[k / d]).collect());
            }
            Op::Neg(x) => acc(*x, g.iter().map(|v| -v).collect()),
            Op::Relu(x) => {
                let tx = self.val(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(v, xv)| if *xv > 0.0 { *v } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(v, y)| v * y).collect()),
            Op::Log(x) => {
                let tx = self.val(*x);
                acc(*x, g.iter().zip(tx.data()).map(|(v, xv)| v / xv).collect());
            }
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(v, y)| v * y * (1.0 - y))
                    .collect(),
            ),
            Op::Clip(x, lo, hi) => {
                let tx = self.val(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(v, xv)| if *xv >= *lo && *xv <= *hi { *v } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.ng(*a) {
                    // g[m×n] · bᵀ[n×k]
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    // aᵀ[k×m] · g[m×n]
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ta.data()[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(o, v)| *o += arp * v);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Segment {
                input,
                segments,
                mode,
                counts,
                argmax,
            } => {
                let tx = self.val(*input);
                let d = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                match mode {
                    Reduce::Sum | Reduce::Mean => {
                        for (r, &s) in segments.iter().enumerate() {
                            let scale = if *mode == Reduce::Mean {
                                1.0 / counts[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..d {
                                gx[r * d + j] += g[s * d + j] * scale;
                            }
                        }
                    }
                    Reduce::Max => {
                        for (slot, &r) in argmax.iter().enumerate() {
                            if r != NO_ARGMAX {
                                gx[r * d + slot % d] += g[slot];
                            }
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::GatherRows(x, idx) => {
                let tx = self.val(*x);
                let d = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[k * d + j];
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(ids) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in ids {
                    let c = self.val(p).cols();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(p, gp);
                    }
                    offset += c;
                }
            }
            Op::SoftmaxRows(x) => {
                let (n, k) = (out.rows(), out.cols());
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    let y = out.row(r);
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        gx[r * k + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let (n, k) = (out.rows(), out.cols());
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    let y = out.row(r);
                    let gr = &g[r * k..(r + 1) * k];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..k {
                        gx[r * k + j] = gr[j] - y[j].exp() * gsum;
                    }
                }
                acc(*x, gx);
            }
            Op::PickPerRow(x, cols) => {
                let tx = self.val(*x);
                let k = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * k + c] += g[r];
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.val(*x).numel()]),
            Op::Mean(x) => {
                let n = self.val(*x).numel().max(1);
                acc(*x, vec![g[0] / n as f64; self.val(*x).numel()]);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::BatchNorm { input, inv_std } => {
                let (n, d) = (out.rows(), out.cols());
                let mut gsum = vec![0.0; d];
                let mut gdot = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        gsum[j] += g[r * d + j];
                        gdot[j] += g[r * d + j] * out.data()[r * d + j];
                    }
                }
                let nf = n as f64;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        let xhat = out.data()[r * d + j];
                        gx[r * d + j] =
                            inv_std[j] / nf * (nf * g[r * d + j] - gsum[j] - xhat * gdot[j]);
                    }
                }
                acc(*input, gx);
            }
        }
    }

    /// Checks that two recorded values have the same shape.
    pub fn check_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        same_shape(op, self.value(a), self.value(b))
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// d(loss)/d(leaf). Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        assert_eq!(v.tape, self.tape, "variable recorded on a different tape");
        self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.idx]])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}
