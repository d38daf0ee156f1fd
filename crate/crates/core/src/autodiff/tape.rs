use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map `out[o] = sum_k w_k * in[src_k] + offset[o]`, stored
/// in compressed-row form. Crop resampling and patch extraction are both
/// expressed this way so pixel gradients can flow back to the source image.
#[derive(Clone, Debug)]
pub struct SparseMap {
    out_shape: Vec<usize>,
    in_len: usize,
    row_start: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
    offset: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_len: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            in_len,
            row_start: vec![0],
            src: Vec::new(),
            weight: Vec::new(),
            offset: Vec::new(),
        }
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_len())
            .map(|o| {
                let (lo, hi) = (self.row_start[o], self.row_start[o + 1]);
                let mut acc = self.offset[o];
                for k in lo..hi {
                    acc += self.weight[k] * input[self.src[k] as usize];
                }
                acc
            })
            .collect()
    }

    fn apply_transpose_add(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, g) in grad_out.iter().enumerate() {
            for k in self.row_start[o]..self.row_start[o + 1] {
                grad_in[self.src[k] as usize] += self.weight[k] * g;
            }
        }
    }

    /// Composes `self` after `inner`: `(self ∘ inner)(x) = self(inner(x))`.
    pub fn compose(&self, inner: &SparseMap) -> Result<SparseMap> {
        if self.in_len != inner.out_len() {
            return Err(Error::shape(
                "sparse_compose",
                format!("outer reads {} values, inner yields {}", self.in_len, inner.out_len()),
            ));
        }
        let mut b = SparseMap::builder(inner.in_len);
        let mut merged: Vec<(u32, f64)> = Vec::new();
        for o in 0..self.out_len() {
            merged.clear();
            let mut offset = self.offset[o];
            for k in self.row_start[o]..self.row_start[o + 1] {
                let (mid, w) = (self.src[k] as usize, self.weight[k]);
                offset += w * inner.offset[mid];
                for j in inner.row_start[mid]..inner.row_start[mid + 1] {
                    merged.push((inner.src[j], w * inner.weight[j]));
                }
            }
            merged.sort_by_key(|&(s, _)| s);
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(merged.len());
            for &(s, w) in &merged {
                match row.last_mut() {
                    Some(last) if last.0 == s => last.1 += w,
                    _ => row.push((s, w)),
                }
            }
            b.push_row(row.iter().map(|&(s, w)| (s as usize, w)), offset);
        }
        b.finish(self.out_shape.clone())
    }
}

pub struct SparseMapBuilder {
    in_len: usize,
    row_start: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
    offset: Vec<f64>,
}

impl SparseMapBuilder {
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f64)>, offset: f64) {
        for (s, w) in taps {
            debug_assert!(s < self.in_len);
            self.src.push(s as u32);
            self.weight.push(w);
        }
        self.row_start.push(self.src.len());
        self.offset.push(offset);
    }

    pub fn finish(self, out_shape: impl Into<Vec<usize>>) -> Result<SparseMap> {
        let out_shape = out_shape.into();
        if out_shape.iter().product::<usize>() != self.offset.len() {
            return Err(Error::shape(
                "sparse_map",
                format!("{} rows for output shape {out_shape:?}", self.offset.len()),
            ));
        }
        Ok(SparseMap {
            out_shape,
            in_len: self.in_len,
            row_start: self.row_start,
            src: self.src,
            weight: self.weight,
            offset: self.offset,
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Log(Var),
    Gelu(Var),
    SoftmaxT(Var, f64),
    LogSoftmaxT(Var, f64),
    L2Normalize(Var),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    Sparse(Var, Rc<SparseMap>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis(..) => "mean_axis",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxT(..) => "softmax_t",
            Op::LogSoftmaxT(..) => "log_softmax_t",
            Op::L2Normalize(..) => "l2_normalize",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Sparse(..) => "sparse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run computation record. Build one per forward pass, call
/// [`Tape::backward`] once on a scalar, then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, f64)>,
}

/// Gradients of a scalar with respect to every tracked leaf of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zero-filled when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the input gradients produced by every `op_name` node. Only meant
    /// for negative-control tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str, factor: f64) {
        self.fault = Some((op_name, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `v` into a constant; no gradient flows through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// Batched matmul `[b,m,k] x [b,k,n]`, or `[b,m,k] x [b,n,k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                (m, k, n),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                b_strides,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            tracked,
        ))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `v` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(v) != [d] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(v)),
            ));
        }
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(v);
        Ok(self.push(value, Op::AddRow(x, v), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= c);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, c), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Mean over `axis`; the axis is removed from the shape. The result is
    /// bitwise invariant to permutations along `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut column = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, c) in column.iter_mut().enumerate() {
                    *c = src[(o * n + j) * inner + i];
                }
                out[o * inner + i] = canonical_sum(&mut column) / n as f64;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis(x, axis), tracked))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.ln());
        let tracked = self.tracked(x);
        self.push(value, Op::Log(x), tracked)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let tracked = self.tracked(x);
        self.push(value, Op::Gelu(x), tracked)
    }

    /// Tempered softmax over the last axis, computed max-shifted.
    pub fn softmax_t(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            softmax_row(row, temperature);
        }
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::SoftmaxT(x, temperature), tracked))
    }

    /// `log(softmax_t(x))` over the last axis, finite for any finite input.
    pub fn log_softmax_t(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            log_softmax_row(row, temperature);
        }
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::LogSoftmaxT(x, temperature), tracked))
    }

    /// Divides every row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let tracked = self.tracked(x);
        self.push(value, Op::L2Normalize(x), tracked)
    }

    /// Selects rows of `x` (viewed as `[rows, last_dim]`) by index.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, d) = (v.rows(), v.last_dim());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(v.row(i));
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new([index.len(), d], out)?,
            Op::GatherRows(x, index.into()),
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    pub fn sparse(&mut self, x: Var, map: Rc<SparseMap>) -> Result<Var> {
        if self.value(x).len() != map.in_len() {
            return Err(Error::shape(
                "sparse",
                format!("map reads {} values, input has {}", map.in_len(), self.value(x).len()),
            ));
        }
        let value = Tensor::new(map.out_shape().to_vec(), map.apply(self.value(x).data()))?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Sparse(x, map), tracked))
    }

    /// Reverse pass from a scalar. Every tracked leaf gets a gradient (zeros
    /// when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let factor = match self.fault {
                Some((name, f)) if name == node.op.name() => f,
                _ => 1.0,
            };
            let g = if factor == 1.0 {
                g
            } else {
                g.into_iter().map(|v| v * factor).collect()
            };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => {
                    let shape = n.value.shape().to_vec();
                    Some(match grads.get_mut(i).and_then(Option::take) {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.tracked(a) {
                    let bv = self.value(b).data();
                    self.accumulate(grads, a, |da| gemm((m, n, k), g, (n, 1), bv, (1, n), 1.0, da));
                }
                if self.tracked(b) {
                    let av = self.value(a).data();
                    self.accumulate(grads, b, |db| gemm((k, m, n), av, (1, k), g, (n, 1), 1.0, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if self.tracked(a) {
                    let bv = self.value(b).data();
                    let bt_strides = if trans_b { (k, 1) } else { (1, n) };
                    self.accumulate(grads, a, |da| {
                        for i in 0..batch {
                            gemm(
                                (m, n, k),
                                &g[i * mn..(i + 1) * mn],
                                (n, 1),
                                &bv[i * kn..(i + 1) * kn],
                                bt_strides,
                                1.0,
                                &mut da[i * mk..(i + 1) * mk],
                            );
                        }
                    });
                }
                if self.tracked(b) {
                    let av = self.value(a).data();
                    self.accumulate(grads, b, |db| {
                        for i in 0..batch {
                            let (gi, ai) = (&g[i * mn..(i + 1) * mn], &av[i * mk..(i + 1) * mk]);
                            let dbi = &mut db[i * kn..(i + 1) * kn];
                            if trans_b {
                                gemm((n, m, k), gi, (1, n), ai, (k, 1), 1.0, dbi);
                            } else {
                                gemm((k, m, n), ai, (1, k), gi, (n, 1), 1.0, dbi);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, g));
                self.accumulate(grads, b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, g));
                self.accumulate(grads, b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |da| {
                    for ((d, gv), bb) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bb;
                    }
                });
                self.accumulate(grads, b, |db| {
                    for ((d, gv), aa) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * aa;
                    }
                });
            }
            Op::AddRow(x, v) => {
                self.accumulate(grads, x, |dx| add_into(dx, g));
                let d = self.value(v).len();
                self.accumulate(grads, v, |dv| {
                    for row in g.chunks(d) {
                        add_into(dv, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, x, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            Op::Sum(x) => {
                self.accumulate(grads, x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.accumulate(grads, x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                self.accumulate(grads, x, |dx| {
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for (d, gv) in dx[base..base + inner].iter_mut().zip(go) {
                                *d += gv / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for ((d, gv), xx) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / xx;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for ((d, gv), xx) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(*xx);
                    }
                });
            }
            Op::SoftmaxT(x, t) => {
                let d = node.value.last_dim();
                self.accumulate(grads, x, |dx| {
                    for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot) / t;
                        }
                    }
                });
            }
            Op::LogSoftmaxT(x, t) => {
                let d = node.value.last_dim();
                self.accumulate(grads, x, |dx| {
                    for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv.exp() * gsum) / t;
                        }
                    }
                });
            }
            Op::L2Normalize(x) => {
                let d = node.value.last_dim();
                let xv = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for (((dxr, gr), yr), xr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).zip(xv.chunks(d)) {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > NORM_EPS {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                                *o += (gv - yv * dot) / norm;
                            }
                        } else {
                            for (o, gv) in dxr.iter_mut().zip(gr) {
                                *o += gv / NORM_EPS;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(x, ref index) => {
                let d = node.value.last_dim();
                self.accumulate(grads, x, |dx| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, x, |dx| add_into(dx, g));
            }
            Op::Sparse(x, ref map) => {
                self.accumulate(grads, x, |dx| map.apply_transpose_add(g, dx));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

/// Sum that depends only on the multiset of values, not their order: the
/// values are sorted before accumulation.
pub(crate) fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {t}")))
    }
}

pub(crate) fn softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max) / temperature;
    }
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c = a · b + beta · c` for an `m x k` by `k x n` product; `c` is dense
/// row-major, `a`/`b` are addressed through (row, column) strides.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([4, 5], 3.0));
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([3], 2.0));
        let unused = tape.leaf(Tensor::full([2, 2], 1.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([3], 2.0));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let p = tape.softmax_t(x, 1.0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::full([4], -3.7));
        let p = tape.softmax_t(x, 0.04).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_matches_scalar_reference() {
        // exp((x - max)/tau) / sum for x = [1,2,3], tau = 0.5
        let e = [(-4.0f64).exp(), (-2.0f64).exp(), 1.0];
        let z: f64 = e.iter().sum();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let p = tape.softmax_t(x, 0.5).unwrap();
        for (got, want) in tape.value(p).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((tape.value(p).data()[2] - 0.866_813_332_197_334_9).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.softmax_t(x, 0.0), Err(Error::Config(_))));
        assert!(matches!(tape.log_softmax_t(x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn matmul_shapes_are_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn sparse_compose_matches_sequential_application() {
        let mut inner = SparseMap::builder(3);
        inner.push_row([(0, 2.0), (2, 1.0)], 0.5);
        inner.push_row([(1, -1.0)], 0.0);
        let inner = inner.finish([2]).unwrap();
        let mut outer = SparseMap::builder(2);
        outer.push_row([(0, 1.0), (1, 3.0)], 1.0);
        outer.push_row([(1, 0.5), (0, 0.5)], 0.0);
        let outer = outer.finish([2]).unwrap();
        let x = [0.3, -1.2, 4.0];
        let seq = outer.apply(&inner.apply(&x));
        let fused = outer.compose(&inner).unwrap().apply(&x);
        for (a, b) in seq.iter().zip(&fused) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
