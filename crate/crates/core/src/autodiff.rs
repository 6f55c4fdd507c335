//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Parameters are read straight
//! from a borrowed [`ParamStore`]; their gradients are accumulated into a
//! [`GradStore`] rather than into tape-owned buffers, which keeps sparse
//! embedding lookups from materialising dense per-example gradients.
//!
//! A tape is built per example and dropped afterwards.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{self, matmul_at_acc, matmul_bt_acc, matmul_raw, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Mean over rows, one value per column: `m×n → 1×n`.
    MeanRows,
    /// Sum over rows, one value per column: `m×n → 1×n`.
    SumRows,
    /// Max-shifted `log Σ exp` along each row: `m×n → m×1`.
    LogSumExpRow,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Unary(Unary, Var),
    RowSoftmax(Var),
    LogSoftmaxRows(Var),
    Reduce(Reduce, Var),
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PairExpand(Var, Var),
    Windows {
        x: Var,
        segments: Vec<Range<usize>>,
        width: usize,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    PickSum(Var, Vec<usize>),
    CrfLogPartition {
        emit: Var,
        trans: Var,
        start: Var,
        unary: Vec<f64>,
        pairwise: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of tape-owned leaves produced by [`Tape::backward`].
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported in [`NodeGrads`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// The leaf for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transposed();
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- element-wise ---------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x (m×n) + bias` with `bias` a length-`n` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let vb = self.value(bias);
        if vb.numel() != n {
            return Err(Error::shape("add_row", self.shape(x), vb.shape()));
        }
        let b = vb.data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let vx = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Abs => f64::abs,
        };
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect());
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    // ---- normalisation and reductions --------------------------------

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                op,
                msg: "input contains NaN or infinite entries".into(),
            })
        }
    }

    /// Softmax along each row, computed with max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("row_softmax", x)?;
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::RowSoftmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let lse = tensor::logsumexp(row);
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::LogSoftmaxRows(x), rg))
    }

    pub fn reduce(&mut self, kind: Reduce, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let t = match kind {
            Reduce::MeanRows | Reduce::SumRows => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                if kind == Reduce::MeanRows {
                    out.iter_mut().for_each(|o| *o /= m as f64);
                }
                Tensor::from_parts(vec![1, n], out)
            }
            Reduce::LogSumExpRow => {
                self.check_finite("logsumexp_row", x)?;
                let out = (0..m).map(|r| tensor::logsumexp(&src[r * n..(r + 1) * n])).collect();
                Tensor::from_parts(vec![m, 1], out)
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reduce(kind, x), rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::MeanRows, x)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Sum of the entries at the given flat indices (repeats count twice).
    pub fn pick_sum(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let mut s = 0.0;
        for &i in &indices {
            let v = vx.data().get(i).ok_or(Error::IndexOutOfRange {
                what: "pick_sum",
                index: i,
                size: vx.numel(),
            })?;
            s += v;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::PickSum(x, indices), rg))
    }

    // ---- structural ---------------------------------------------------

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if range.start >= range.end || range.end > m {
            return Err(Error::invalid("slice_rows", format!("{range:?} of {m} rows")));
        }
        let data = self.value(x).data()[range.start * n..range.end * n].to_vec();
        let t = Tensor::from_parts(vec![range.len(), n], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows(x, range.start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if range.start >= range.end || range.end > n {
            return Err(Error::invalid("slice_cols", format!("{range:?} of {n} columns")));
        }
        let src = self.value(x).data();
        let w = range.len();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + range.start..r * n + range.end]);
        }
        let t = Tensor::from_parts(vec![m, w], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceCols(x, range.start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols", "no inputs"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![m, total], data);
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows", "no inputs"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::from_parts(vec![rows, n], data);
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather; the backward pass scatters additively, so repeated ids
    /// accumulate and absent rows are never touched.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "empty id list"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: m,
                });
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let t = Tensor::from_parts(vec![ids.len(), n], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::GatherRows(x, ids.to_vec()), rg))
    }

    /// All ordered pairs: row `i·n + k` of the result is `src[i] + tgt[k]`.
    pub fn pair_expand(&mut self, src: Var, tgt: Var) -> Result<Var> {
        let (n, d) = self.dims(src);
        if self.dims(tgt) != (n, d) {
            return Err(Error::shape("pair_expand", self.shape(src), self.shape(tgt)));
        }
        let s = self.value(src).data();
        let g = self.value(tgt).data();
        let mut data = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for k in 0..n {
                data.extend(
                    s[i * d..(i + 1) * d]
                        .iter()
                        .zip(&g[k * d..(k + 1) * d])
                        .map(|(a, b)| a + b),
                );
            }
        }
        let t = Tensor::from_parts(vec![n * n, d], data);
        let rg = self.any_grad(&[src, tgt]);
        Ok(self.push(t, Op::PairExpand(src, tgt), rg))
    }

    /// Sliding windows of `width` rows within each segment, flattened into
    /// one row per position. Window `t` covers rows `t - (width-1)/2 ..`;
    /// slots outside the segment are zero.
    pub fn windows(&mut self, x: Var, segments: &[Range<usize>], width: usize) -> Result<Var> {
        if width == 0 {
            return Err(Error::invalid("windows", "width must be at least 1"));
        }
        let (m, d) = self.dims(x);
        if segments.iter().any(|s| s.end > m || s.start > s.end) {
            return Err(Error::invalid("windows", "segment out of range"));
        }
        let src = self.value(x).data();
        let off = (width - 1) / 2;
        let mut data = vec![0.0; m * width * d];
        for seg in segments {
            for t in seg.clone() {
                for j in 0..width {
                    let p = (t + j).wrapping_sub(off);
                    if p < seg.start || p >= seg.end {
                        continue;
                    }
                    let dst = t * width * d + j * d;
                    data[dst..dst + d].copy_from_slice(&src[p * d..(p + 1) * d]);
                }
            }
        }
        let t = Tensor::from_parts(vec![m, width * d], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            t,
            Op::Windows {
                x,
                segments: segments.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Column-wise max over the rows of each (non-empty) segment.
    pub fn segment_max(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (m, d) = self.dims(x);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(segments.len() * d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for seg in segments {
            if seg.is_empty() || seg.end > m {
                return Err(Error::invalid("segment_max", format!("bad segment {seg:?}")));
            }
            for c in 0..d {
                let mut best = seg.start;
                for r in seg.clone() {
                    if src[r * d + c] > src[best * d + c] {
                        best = r;
                    }
                }
                data.push(src[best * d + c]);
                argmax.push(best);
            }
        }
        let t = Tensor::from_parts(vec![segments.len(), d], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SegmentMax { x, argmax }, rg))
    }

    /// Log partition function of a linear-chain CRF, by the forward
    /// algorithm in log space. Its gradient is the forward-backward marginals.
    pub fn crf_log_partition(&mut self, emit: Var, trans: Var, start: Var) -> Result<Var> {
        let (n, l) = self.dims(emit);
        if self.value(trans).numel() != l * l || self.dims(trans).0 != l {
            return Err(Error::shape("crf_log_partition", self.shape(emit), self.shape(trans)));
        }
        if self.value(start).numel() != l {
            return Err(Error::shape("crf_log_partition", self.shape(emit), self.shape(start)));
        }
        self.check_finite("crf_log_partition", emit)?;
        let m = crate::crf::forward_backward(
            self.value(emit).data(),
            self.value(trans).data(),
            self.value(start).data(),
            n,
            l,
        );
        let rg = self.any_grad(&[emit, trans, start]);
        Ok(self.push(
            Tensor::scalar(m.log_z),
            Op::CrfLogPartition {
                emit,
                trans,
                start,
                unary: m.unary,
                pairwise: m.pairwise,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Parameter gradients are added to
    /// `param_grads`; gradients of [`Tape::input`] leaves are returned.
    pub fn backward(&self, loss: Var, param_grads: &mut GradStore) -> Result<NodeGrads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut sink = Sink {
            tape: self,
            grads: &mut grads,
            params: param_grads,
        };
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = sink.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut sink);
            sink.grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], sink: &mut Sink<'_, '_>) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                sink.add(*a, |buf| matmul_bt_acc(buf, g, vb, m, n, k));
                sink.add(*b, |buf| matmul_at_acc(buf, va, g, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                match kind {
                    Binary::Add => {
                        sink.add(*a, |buf| axpy(buf, 1.0, g));
                        sink.add(*b, |buf| axpy(buf, 1.0, g));
                    }
                    Binary::Sub => {
                        sink.add(*a, |buf| axpy(buf, 1.0, g));
                        sink.add(*b, |buf| axpy(buf, -1.0, g));
                    }
                    Binary::Mul => {
                        sink.add(*a, |buf| {
                            for ((o, gi), y) in buf.iter_mut().zip(g).zip(vb) {
                                *o += gi * y;
                            }
                        });
                        sink.add(*b, |buf| {
                            for ((o, gi), x) in buf.iter_mut().zip(g).zip(va) {
                                *o += gi * x;
                            }
                        });
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let n = self.dims(*x).1;
                sink.add(*x, |buf| axpy(buf, 1.0, g));
                sink.add(*bias, |buf| {
                    for row in g.chunks(n) {
                        axpy(buf, 1.0, row);
                    }
                });
            }
            Op::Affine(x, scale) => sink.add(*x, |buf| axpy(buf, *scale, g)),
            Op::Unary(kind, x) => {
                let y = out.unwrap().data();
                match kind {
                    Unary::Tanh => {
                        let k = faults::tanh_scale();
                        sink.add(*x, |buf| {
                            for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                                *o += k * gi * (1.0 - yi * yi);
                            }
                        })
                    }
                    Unary::Sigmoid => sink.add(*x, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    }),
                    Unary::Abs => {
                        let vx = self.value(*x).data();
                        sink.add(*x, |buf| {
                            for ((o, gi), xi) in buf.iter_mut().zip(g).zip(vx) {
                                let s = if *xi > 0.0 {
                                    1.0
                                } else if *xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                *o += gi * s;
                            }
                        })
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let n = self.dims(*x).1;
                let y = out.unwrap().data();
                sink.add(*x, |buf| {
                    for ((o, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = self.dims(*x).1;
                let y = out.unwrap().data();
                sink.add(*x, |buf| {
                    for ((o, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Reduce(kind, x) => {
                let (m, n) = self.dims(*x);
                match kind {
                    Reduce::MeanRows | Reduce::SumRows => {
                        let s = if *kind == Reduce::MeanRows { 1.0 / m as f64 } else { 1.0 };
                        sink.add(*x, |buf| {
                            for row in buf.chunks_mut(n) {
                                axpy(row, s, g);
                            }
                        });
                    }
                    Reduce::LogSumExpRow => {
                        let vx = self.value(*x).data();
                        let y = out.unwrap().data();
                        sink.add(*x, |buf| {
                            for r in 0..m {
                                for c in 0..n {
                                    buf[r * n + c] += g[r] * (vx[r * n + c] - y[r]).exp();
                                }
                            }
                        });
                    }
                }
            }
            Op::SumAll(x) => sink.add(*x, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::PickSum(x, indices) => sink.add(*x, |buf| {
                for &i in indices {
                    buf[i] += g[0];
                }
            }),
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                sink.add(*x, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => sink.add(*x, |buf| axpy(buf, 1.0, g)),
            Op::SliceRows(x, start) => {
                let n = self.dims(*x).1;
                sink.add(*x, |buf| axpy(&mut buf[start * n..start * n + g.len()], 1.0, g));
            }
            Op::SliceCols(x, start) => {
                let n = self.dims(*x).1;
                let w = out.unwrap().cols();
                sink.add(*x, |buf| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        axpy(&mut buf[r * n + start..r * n + start + w], 1.0, gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.unwrap().cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    sink.add(p, |buf| {
                        for (r, row) in buf.chunks_mut(w).enumerate() {
                            axpy(row, 1.0, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    sink.add(p, |buf| axpy(buf, 1.0, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows(x, ids) => {
                let n = self.dims(*x).1;
                sink.add(*x, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut buf[id * n..(id + 1) * n], 1.0, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::PairExpand(src, tgt) => {
                let (n, d) = self.dims(*src);
                sink.add(*src, |buf| {
                    for i in 0..n {
                        for k in 0..n {
                            let row = &g[(i * n + k) * d..(i * n + k + 1) * d];
                            axpy(&mut buf[i * d..(i + 1) * d], 1.0, row);
                        }
                    }
                });
                sink.add(*tgt, |buf| {
                    for i in 0..n {
                        for k in 0..n {
                            let row = &g[(i * n + k) * d..(i * n + k + 1) * d];
                            axpy(&mut buf[k * d..(k + 1) * d], 1.0, row);
                        }
                    }
                });
            }
            Op::Windows { x, segments, width } => {
                let d = self.dims(*x).1;
                let off = (width - 1) / 2;
                sink.add(*x, |buf| {
                    for seg in segments {
                        for t in seg.clone() {
                            for j in 0..*width {
                                let p = (t + j).wrapping_sub(off);
                                if p < seg.start || p >= seg.end {
                                    continue;
                                }
                                let src = t * width * d + j * d;
                                axpy(&mut buf[p * d..(p + 1) * d], 1.0, &g[src..src + d]);
                            }
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let d = self.dims(*x).1;
                sink.add(*x, |buf| {
                    for (slot, &row) in argmax.iter().enumerate() {
                        buf[row * d + slot % d] += g[slot];
                    }
                });
            }
            Op::CrfLogPartition {
                emit,
                trans,
                start,
                unary,
                pairwise,
            } => {
                let l = self.dims(*emit).1;
                sink.add(*emit, |buf| axpy(buf, g[0], unary));
                sink.add(*trans, |buf| axpy(buf, g[0], pairwise));
                sink.add(*start, |buf| axpy(buf, g[0], &unary[..l]));
            }
        }
    }
}

struct Sink<'a, 'p> {
    tape: &'a Tape<'p>,
    grads: &'a mut Vec<Option<Vec<f64>>>,
    params: &'a mut GradStore,
}

impl Sink<'_, '_> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        if let Op::Param(id) = node.op {
            if let Some(buf) = self.params.get_mut(id) {
                f(buf);
            }
            return;
        }
        let numel = self.tape.value(v).numel();
        f(self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]));
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Hooks that corrupt backward rules, used to check that the gradient
/// checker actually catches broken derivatives.
pub mod faults {
    #[cfg(any(test, feature = "fault-injection"))]
    thread_local! {
        static TANH_SCALE: std::cell::Cell<f64> = const { std::cell::Cell::new(1.0) };
    }

    /// Multiplies the tanh derivative by `scale` on this thread until reset.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn set_tanh_backward_scale(scale: f64) {
        TANH_SCALE.with(|c| c.set(scale));
    }

    #[cfg(any(test, feature = "fault-injection"))]
    pub(crate) fn tanh_scale() -> f64 {
        TANH_SCALE.with(|c| c.get())
    }

    #[cfg(not(any(test, feature = "fault-injection")))]
    #[inline(always)]
    pub(crate) fn tanh_scale() -> f64 {
        1.0
    }
}

// ---- gradient checking -----------------------------------------------

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    /// Relative-error denominator floor used for this check.
    pub floor: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self, tol: f64) -> impl Iterator<Item = &GroupError> {
        self.groups
            .iter()
            .filter(move |g| g.max_rel_error >= tol || g.max_rel_error.is_nan())
    }
}

/// Denominator floor of the relative error. A central difference with step
/// `h` on a loss of size `|f|` carries rounding noise of about
/// `machine_eps · |f| / h`; entries whose gradient is not well above that
/// noise are compared in absolute terms instead.
pub fn rel_error_floor(loss: f64, h: f64) -> f64 {
    (1e5 * f64::EPSILON * loss.abs().max(1.0) / h).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries_per_param: None,
        }
    }
}

/// Compares back-propagated gradients of `f` with central differences on
/// every trainable parameter entry.
///
/// The relative error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` with the floor
/// from [`rel_error_floor`].
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    grad_check_with(
        store,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
        f,
    )
}

pub fn grad_check_with<F>(store: &mut ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside (0, 1e-2]", opts.eps),
        ));
    }
    let mut analytic = GradStore::for_params(store);
    let floor = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::invalid("grad_check", "function output is not scalar"));
        }
        tape.backward(loss, &mut analytic)?;
        rel_error_floor(tape.scalar(loss), opts.eps)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut groups = Vec::new();
    for id in ids {
        let Some(grad) = analytic.get(id).map(|g| g.to_vec()) else {
            continue;
        };
        let numel = grad.len();
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && numel > k => numel.div_ceil(k),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for e in (0..numel).step_by(stride) {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + opts.eps;
            let up = eval(store);
            store.value_mut(id).data_mut()[e] = orig - opts.eps;
            let down = eval(store);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (up? - down?) / (2.0 * opts.eps);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            checked += 1;
        }
        groups.push(GroupError {
            name: store.get(id).name.clone(),
            checked,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { groups, floor })
}
