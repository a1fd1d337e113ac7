//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Parameters enter
//! through [`Graph::param`]; whether they receive gradients is decided by the
//! graph's trainable set. [`Graph::backward`] walks the record in reverse and
//! returns [`Gradients`] for everything that requires them.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, dot, gelu, gelu_grad};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    SumBlocks(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    L2Normalize(Var, Vec<f64>),
    SegmentAttention {
        scores: Var,
        values: Var,
        segments: Vec<Vec<usize>>,
        alphas: Vec<f64>,
    },
    Transpose(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which parameters a graph differentiates.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    Only(Rc<HashSet<ParamId>>),
}

impl Trainable {
    pub fn only(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Trainable::Only(Rc::new(ids.into_iter().collect()))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Only(set) => set.contains(&id),
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    trainable: Trainable,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph in which every parameter is trainable.
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            trainable,
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    /// Non-recording graph; `backward` fails with [`Error::NoTape`].
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient (when recording).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The graph's single leaf for `id`; created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.trainable.contains(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    fn check2(&self, op: &'static str, v: Var) -> Result<()> {
        if self.nodes[v.0].value.rank() != 2 {
            return Err(Error::shape(op, "rank-2 tensor required"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        self.check2(op, a)?;
        let (r, c) = (self.value(row).rows(), self.value(row).cols());
        if r != 1 || c != self.value(a).cols() {
            return Err(Error::shape(op, format!("row {r}x{c} vs {:?}", self.value(a).shape())));
        }
        Ok(())
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1×d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies `a` by the `1×1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", "scalar operand must be 1x1"));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).scaled(k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| gelu(v)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Softmax over rows; masked-out (`false`) entries are exactly zero and
    /// pass no gradient.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        if !self.value(a).is_finite() {
            return Err(Error::NonFiniteInput("softmax_rows"));
        }
        let out = kernels::softmax_rows_masked(self.value(a), mask)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check2("layer_norm", x)?;
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        if !xv.is_finite() {
            return Err(Error::NonFiniteInput("layer_norm"));
        }
        let (xhat, inv_std) = kernels::normalize_rows(xv, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = kernels::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = kernels::concat_cols(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_rows(self.value(a), start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_cols(self.value(a), start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Rows of `a` picked by `index` (repeats allowed); embedding lookup.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check2("gather_rows", a)?;
        let n = self.value(a).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {n}")));
        }
        let out = self.value(a).select_rows(index);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), rg))
    }

    /// Column means, `1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check2("mean_rows", a)?;
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::EmptySet);
        }
        let c = x.cols();
        let mut out = vec![0.0; c];
        for i in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        for o in &mut out {
            *o /= n;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Sums each contiguous block of `block` columns: `n×(h·block) → n×h`.
    pub fn sum_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        self.check2("sum_blocks", a)?;
        let x = self.value(a);
        if block == 0 || !x.cols().is_multiple_of(block) {
            return Err(Error::shape("sum_blocks", format!("{} cols, block {block}", x.cols())));
        }
        let h = x.cols() / block;
        let mut out = Vec::with_capacity(x.rows() * h);
        for i in 0..x.rows() {
            let row = x.row(i);
            for k in 0..h {
                out.push(row[k * block..(k + 1) * block].iter().sum());
            }
        }
        let rows = x.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, h, out), Op::SumBlocks(a, block), rg))
    }

    /// Mean cross-entropy of rows with a target; rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check2("cross_entropy", logits)?;
        let x = self.value(logits);
        if targets.len() != x.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), x.rows()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyAnswer);
        }
        if targets.iter().flatten().any(|&t| t >= x.cols()) {
            return Err(Error::shape("cross_entropy", "target out of range"));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput("cross_entropy"));
        }
        let probs = kernels::softmax_rows_masked(x, None)?;
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = x.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        loss /= count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm (norm clamped at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check2("l2_normalize_rows", a)?;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2Normalize(a, norms), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check2("transpose", a)?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Per-segment multi-head attention pooling.
    ///
    /// `scores` is `n×h` (one logit per row and head), `values` is `n×d` with
    /// `d` divisible by `h`. For each segment (a non-empty list of row indices)
    /// and head, the head's slice of the output is the softmax-weighted sum of
    /// the member rows' value slices. Members are reduced in an order derived
    /// from their contents alone, so any permutation of a segment gives
    /// bit-identical output.
    pub fn segment_attention(&mut self, scores: Var, values: Var, segments: &[Vec<usize>]) -> Result<Var> {
        self.check2("segment_attention", scores)?;
        self.check2("segment_attention", values)?;
        let (s, v) = (self.value(scores), self.value(values));
        let (n, heads) = (s.rows(), s.cols());
        let d = v.cols();
        if v.rows() != n || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "segment_attention",
                format!("scores {:?}, values {:?}", s.shape(), v.shape()),
            ));
        }
        if !s.is_finite() || !v.is_finite() {
            return Err(Error::NonFiniteInput("segment_attention"));
        }
        let dh = d / heads;
        let mut sorted = Vec::with_capacity(segments.len());
        let mut alphas = Vec::new();
        let mut out = vec![0.0; segments.len() * d];
        for (si, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::EmptySet);
            }
            if let Some(&bad) = seg.iter().find(|&&i| i >= n) {
                return Err(Error::shape("segment_attention", format!("member {bad} >= {n}")));
            }
            let mut members = seg.clone();
            members.sort_by(|&a, &b| content_cmp(s.row(a), s.row(b)).then(content_cmp(v.row(a), v.row(b))));
            let orow = &mut out[si * d..(si + 1) * d];
            for h in 0..heads {
                let max = members.iter().map(|&i| s.get(i, h)).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = members.iter().map(|&i| (s.get(i, h) - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (&i, e) in members.iter().zip(&exps) {
                    let a = e / total;
                    alphas.push(a);
                    let vrow = &v.row(i)[h * dh..(h + 1) * dh];
                    for (o, x) in orow[h * dh..(h + 1) * dh].iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
            }
            sorted.push(members);
        }
        let rg = self.rg(&[scores, values]);
        Ok(self.push(
            Tensor::matrix(segments.len(), d, out),
            Op::SegmentAttention {
                scores,
                values,
                segments: sorted,
                alphas,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::NoTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, kernels::matmul_nt(g, self.value(*b))?);
                }
                if needs(b) {
                    acc(*b, kernels::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if needs(a) {
                    acc(*a, kernels::matmul(g, self.value(*b))?);
                }
                if needs(b) {
                    acc(*b, kernels::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, hadamard(g, self.value(*b)));
                }
                if needs(b) {
                    acc(*b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if needs(a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if needs(row) {
                    acc(*row, column_sums(&hadamard(g, self.value(*a))));
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    acc(*a, g.scaled(*s));
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data()[0];
                if needs(a) {
                    acc(*a, g.scaled(k));
                }
                if needs(s) {
                    let d: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::scalar(d));
                }
            }
            Op::Exp(a) => {
                if needs(a) {
                    acc(*a, hadamard(g, &node.value));
                }
            }
            Op::Gelu(a) => {
                if needs(a) {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if needs(x) {
                    let c = xhat.cols();
                    let mut gx = Tensor::zeros(xhat.rows(), c);
                    for i in 0..xhat.rows() {
                        let (xh, gr) = (xhat.row(i), g.row(i));
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxhat, xh) / c as f64;
                        for ((o, d), xv) in gx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
                            *o = inv_std[i] * (d - mean_d - xv * mean_dx);
                        }
                    }
                    acc(*x, gx);
                }
                if needs(gain) {
                    let t = column_sums(&hadamard(g, xhat));
                    acc(*gain, reshape_like(t, self.value(*gain)));
                }
                if needs(bias) {
                    acc(*bias, reshape_like(column_sums(g), self.value(*bias)));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if needs(p) {
                        acc(*p, kernels::slice_rows(g, start, r)?);
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if needs(p) {
                        acc(*p, kernels::slice_cols(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(a) {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    ga.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    acc(*a, ga);
                }
            }
            Op::SliceCols(a, start) => {
                if needs(a) {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, ga);
                }
            }
            Op::GatherRows(a, index) => {
                if needs(a) {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for (k, &i) in index.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::MeanRows(a) => {
                if needs(a) {
                    let src = self.value(*a);
                    let n = src.rows() as f64;
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.data()) {
                            *o = v / n;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::SumAll(a) => {
                if needs(a) {
                    let src = self.value(*a);
                    let k = g.data()[0];
                    acc(*a, Tensor::new(src.shape().to_vec(), vec![k; src.numel()])?);
                }
            }
            Op::SumBlocks(a, block) => {
                if needs(a) {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        let gr = g.row(i).to_vec();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = gr[j / block];
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if needs(logits) {
                    let k = g.data()[0] / *count as f64;
                    let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o = k * p;
                            }
                            let cur = gl.get(i, t);
                            gl.set(i, t, cur - k);
                        }
                    }
                    acc(*logits, gl);
                }
            }
            Op::L2Normalize(a, norms) => {
                if needs(a) {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * s) / norms[i];
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    acc(*a, g.transpose());
                }
            }
            Op::SegmentAttention {
                scores,
                values,
                segments,
                alphas,
            } => {
                let (s, v) = (self.value(*scores), self.value(*values));
                let heads = s.cols();
                let d = v.cols();
                let dh = d / heads;
                let mut gs = Tensor::zeros(s.rows(), heads);
                let mut gv = Tensor::zeros(v.rows(), d);
                let mut k = 0;
                for (si, members) in segments.iter().enumerate() {
                    let grow = g.row(si);
                    for h in 0..heads {
                        let gh = &grow[h * dh..(h + 1) * dh];
                        let a = &alphas[k..k + members.len()];
                        k += members.len();
                        let dalpha: Vec<f64> = members
                            .iter()
                            .map(|&i| dot(gh, &v.row(i)[h * dh..(h + 1) * dh]))
                            .collect();
                        let mean: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                        for (j, &i) in members.iter().enumerate() {
                            let cur = gs.get(i, h);
                            gs.set(i, h, cur + a[j] * (dalpha[j] - mean));
                            for (o, x) in gv.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(gh) {
                                *o += a[j] * x;
                            }
                        }
                    }
                }
                if needs(scores) {
                    acc(*scores, gs);
                }
                if needs(values) {
                    acc(*values, gv);
                }
            }
        }
        Ok(())
    }
}

fn content_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), t.into_data()).expect("same element count")
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One entry per parameter used in the graph that required a gradient;
    /// parameters the loss did not reach get zeros.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter(|(_, v)| graph.requires_grad(*v))
            .map(|(id, v)| {
                let g = self.grads[v.0].clone().unwrap_or_else(|| graph.value(*v).zeros_like());
                (*id, g)
            })
            .collect()
    }
}
