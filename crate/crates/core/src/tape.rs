//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! the data its adjoint rule needs. [`Var::backward`] walks the record in
//! reverse and returns gradients for every node. A tape uses interior
//! mutability and is `!Send`: one tape belongs to one thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{moments, split_axis, Tensor};

/// Index sentinel for [`Var::gather`]: the output entry is zero.
pub const GATHER_ZERO: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    DivRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softmax(usize, usize),
    MaskedSoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, shift: usize, normed: Vec<f64>, inv_std: Vec<f64> },
    Gelu(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    GroupMean(usize, Rc<Vec<Vec<usize>>>),
    ConcatCols(Vec<usize>),
    RowNormalize(usize, Vec<f64>),
    LocalCorrelation { a: usize, b: usize, height: usize, width: usize, radius: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Parameters and constants are both leaves; the
    /// caller decides which gradients it reads back.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        Ok(self.leaf(Tensor::scalar(value)?))
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Rc::new(value), op)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.record(v, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.record(v, Op::Transpose(self.id)))
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let v = self.value().zip_map(&rhs.value(), "add", |a, b| a + b)?;
        Ok(self.record(v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let v = self.value().zip_map(&rhs.value(), "sub", |a, b| a - b)?;
        Ok(self.record(v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let v = self.value().zip_map(&rhs.value(), "mul", |a, b| a * b)?;
        Ok(self.record(v, Op::Mul(self.id, rhs.id)))
    }

    /// `[M x N] + [N]`, the bias broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let x = self.value();
        let r = row.value();
        let (_, n) = x.dims2()?;
        if r.shape() != [n] {
            return Err(shape_err("add_row", &x, &r));
        }
        let data = x
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r.data()).map(|(a, b)| a + b))
            .collect();
        let v = Tensor::from_parts("add_row", x.shape().to_vec(), data)?;
        Ok(self.record(v, Op::AddRow(self.id, row.id)))
    }

    /// Divides row `i` of `[M x N]` by `divisors[i]`. Rows whose divisor is
    /// not positive come out as zeros and pass no gradient.
    pub fn div_rows(&self, divisors: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&divisors);
        let x = self.value();
        let s = divisors.value();
        let (m, n) = x.dims2()?;
        if s.shape() != [m] {
            return Err(shape_err("div_rows", &x, &s));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let d = s.data()[i];
            if d > 0.0 {
                for j in 0..n {
                    data[i * n + j] = x.data()[i * n + j] / d;
                }
            }
        }
        let v = Tensor::from_parts("div_rows", vec![m, n], data)?;
        Ok(self.record(v, Op::DivRows(self.id, divisors.id)))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map("scale", |a| a * c)?;
        Ok(self.record(v, Op::Scale(self.id, c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map("add_scalar", |a| a + c)?;
        Ok(self.record(v, Op::AddScalar(self.id)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().softmax_axis(axis)?;
        Ok(self.record(v, Op::Softmax(self.id, axis)))
    }

    /// Row softmax of `[M x N]` where entry `(i, j)` takes part only when
    /// `allowed[i * N + j]`. Excluded entries behave as `-inf` logits and come
    /// out exactly zero. A row with nothing allowed is a contract error.
    pub fn masked_softmax_rows(&self, allowed: &[bool]) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        if allowed.len() != m * n {
            return Err(Error::InvalidShape {
                op: "masked_softmax",
                msg: format!("mask has {} entries for a {m}x{n} input", allowed.len()),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let ok = &allowed[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("attention row {i} has every position masked")));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if ok[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let v = Tensor::from_parts("masked_softmax", vec![m, n], out)?;
        Ok(self.record(v, Op::MaskedSoftmaxRows(self.id)))
    }

    pub fn layer_norm(&self, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&shift);
        let x = self.value();
        let g = gain.value();
        let b = shift.value();
        let v = x.layer_norm(&g, &b)?;
        let d = *x.shape().last().unwrap();
        let mut normed = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for row in x.data().chunks(d) {
            let (mean, r) = moments(row);
            normed.extend(row.iter().map(|v| (v - mean) * r));
            inv_std.push(r);
        }
        Ok(self.record(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                shift: shift.id,
                normed,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let v = self.value().map("gelu", |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })?;
        Ok(self.record(v, Op::Gelu(self.id)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value().map("sqrt", f64::sqrt)?;
        Ok(self.record(v, Op::Sqrt(self.id)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.value().map("exp", f64::exp)?;
        Ok(self.record(v, Op::Exp(self.id)))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        let v = self.value().map("ln", f64::ln)?;
        Ok(self.record(v, Op::Ln(self.id)))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        let v = self.value().map("square", |x| x * x)?;
        Ok(self.record(v, Op::Square(self.id)))
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum())?;
        Ok(self.record(v, Op::SumAll(self.id)))
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64)?;
        Ok(self.record(v, Op::MeanAll(self.id)))
    }

    /// Sums over the last axis: `[M x N] -> [M]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let data = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        let v = Tensor::from_parts("sum_rows", vec![m], data)?;
        Ok(self.record(v, Op::SumRows(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(self.id)))
    }

    /// `out.flat[i] = self.flat[index[i]]`, or zero for [`GATHER_ZERO`].
    /// Covers patch rearrangement, padding and column slicing.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("{} indices for output shape {shape:?}", index.len()),
            });
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < x.len() {
                data.push(x.data()[i]);
            } else {
                return Err(Error::InvalidShape {
                    op: "gather",
                    msg: format!("index {i} out of range for {} values", x.len()),
                });
            }
        }
        let v = Tensor::from_parts("gather", shape.to_vec(), data)?;
        Ok(self.record(v, Op::Gather(self.id, index)))
    }

    /// Row `k` of the output is the mean of the input rows listed in
    /// `groups[k]`. Additions only, no multiply-accumulates.
    pub fn group_mean_rows(&self, groups: Rc<Vec<Vec<usize>>>) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let mut data = vec![0.0; groups.len() * n];
        for (k, group) in groups.iter().enumerate() {
            if group.is_empty() || group.iter().any(|&r| r >= m) {
                return Err(Error::InvalidShape {
                    op: "group_mean",
                    msg: format!("group {k} is empty or indexes past row {m}"),
                });
            }
            let out = &mut data[k * n..(k + 1) * n];
            for &r in group {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let c = group.len() as f64;
            out.iter_mut().for_each(|o| *o /= c);
        }
        let v = Tensor::from_parts("group_mean", vec![groups.len(), n], data)?;
        Ok(self.record(v, Op::GroupMean(self.id, groups)))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (m, _) = values[0].dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            let (r, c) = v.dims2()?;
            if r != m {
                return Err(shape_err("concat", &values[0], v));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::from_parts("concat", vec![m, total], data)?;
        Ok(first.record(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn row_normalize(&self) -> Result<Var<'t>> {
        const EPS: f64 = 1e-12;
        let x = self.value();
        let (m, n) = x.dims2()?;
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for row in x.data().chunks(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let v = Tensor::from_parts("row_normalize", vec![m, n], data)?;
        Ok(self.record(v, Op::RowNormalize(self.id, norms)))
    }

    /// Local correlation between two token grids of shape `[H*W x D]`:
    /// `out[t, j] = <a[t], b[t + offset_j]>` over the `(2r+1)^2` offsets
    /// `(dy, dx)` in row-major order, zero where the offset leaves the grid.
    pub fn local_correlation(&self, other: Var<'t>, height: usize, width: usize, radius: usize) -> Result<Var<'t>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (t, d) = a.dims2()?;
        if a.shape() != b.shape() || t != height * width {
            return Err(shape_err("local_correlation", &a, &b));
        }
        let side = 2 * radius + 1;
        let offsets = side * side;
        let mut data = vec![0.0; t * offsets];
        for y in 0..height {
            for x in 0..width {
                let ta = y * width + x;
                for (j, (ty, tx)) in correlation_offsets(y, x, height, width, radius).enumerate() {
                    if let Some(tb) = ty.zip(tx).map(|(ty, tx)| ty * width + tx) {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += a.data()[ta * d + k] * b.data()[tb * d + k];
                        }
                        data[ta * offsets + j] = acc;
                    }
                }
            }
        }
        let v = Tensor::from_parts("local_correlation", vec![t, offsets], data)?;
        Ok(self.record(
            v,
            Op::LocalCorrelation {
                a: self.id,
                b: other.id,
                height,
                width,
                radius,
            },
        ))
    }

    /// Gradients of this (single-element) value with respect to every node.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be a single value, got shape {:?}", nodes[self.id].value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let gt = Tensor::from_parts("grad", out.shape().to_vec(), g.clone())?;
                    let ga = gt.matmul(&val(*b).transpose()?)?;
                    let gb = val(*a).transpose()?.matmul(&gt)?;
                    accumulate(&mut grads, *a, ga.data());
                    accumulate(&mut grads, *b, gb.data());
                }
                Op::Transpose(a) => {
                    let gt = Tensor::from_parts("grad", out.shape().to_vec(), g.clone())?.transpose()?;
                    accumulate(&mut grads, *a, gt.data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddRow(a, r) => {
                    let n = val(*r).len();
                    let mut gr = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gr.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *r, &gr);
                }
                Op::DivRows(a, s) => {
                    let x = val(*a);
                    let sv = val(*s);
                    let (m, n) = x.dims2()?;
                    let mut gx = vec![0.0; m * n];
                    let mut gs = vec![0.0; m];
                    for i in 0..m {
                        let d = sv.data()[i];
                        if d > 0.0 {
                            let mut acc = 0.0;
                            for j in 0..n {
                                gx[i * n + j] = g[i * n + j] / d;
                                acc += g[i * n + j] * x.data()[i * n + j];
                            }
                            gs[i] = -acc / (d * d);
                        }
                    }
                    accumulate(&mut grads, *a, &gx);
                    accumulate(&mut grads, *s, &gs);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &gx);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let (_, n) = out.dims2()?;
                    let y = out.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            xr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    normed,
                    inv_std,
                } => {
                    let gv = val(*gain);
                    let d = gv.len();
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, nr), xr)) in g.chunks(d).zip(normed.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            gg[j] += gr[j] * nr[j];
                            gb[j] += gr[j];
                            let dn = gr[j] * gv.data()[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for j in 0..d {
                            let dn = gr[j] * gv.data()[j];
                            xr[j] = inv_std[r] * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gain, &gg);
                    accumulate(&mut grads, *shift, &gb);
                }
                Op::Gelu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| {
                            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sqrt(a) => {
                    let ga: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g / (2.0 * y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let (_, n) = val(*a).dims2()?;
                    let ga: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::Gather(a, index) => {
                    let mut ga = vec![0.0; val(*a).len()];
                    for (&i, &v) in index.iter().zip(&g) {
                        if i != GATHER_ZERO {
                            ga[i] += v;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::GroupMean(a, groups) => {
                    let x = val(*a);
                    let (_, n) = x.dims2()?;
                    let mut ga = vec![0.0; x.len()];
                    for (k, group) in groups.iter().enumerate() {
                        let c = group.len() as f64;
                        for &r in group {
                            for j in 0..n {
                                ga[r * n + j] += g[k * n + j] / c;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let total = out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let (m, w) = pv.dims2()?;
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads, p, &gp);
                        offset += w;
                    }
                }
                Op::RowNormalize(a, norms) => {
                    let n = out.shape()[1];
                    let mut ga = vec![0.0; g.len()];
                    for (i, ((gr, yr), xr)) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            xr[j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LocalCorrelation {
                    a,
                    b,
                    height,
                    width,
                    radius,
                } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let d = av.shape()[1];
                    let offsets = out.shape()[1];
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for y in 0..*height {
                        for x in 0..*width {
                            let ta = y * width + x;
                            for (j, (ty, tx)) in correlation_offsets(y, x, *height, *width, *radius).enumerate() {
                                if let Some(tb) = ty.zip(tx).map(|(ty, tx)| ty * width + tx) {
                                    let gv = g[ta * offsets + j];
                                    for k in 0..d {
                                        ga[ta * d + k] += gv * bv.data()[tb * d + k];
                                        gb[tb * d + k] += gv * av.data()[ta * d + k];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts("gradient", nodes[i].value.shape().to_vec(), g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }
}

/// Neighbour coordinates for one token, `None` where off-grid.
fn correlation_offsets(
    y: usize,
    x: usize,
    height: usize,
    width: usize,
    radius: usize,
) -> impl Iterator<Item = (Option<usize>, Option<usize>)> {
    let r = radius as isize;
    (-r..=r).flat_map(move |dy| {
        (-r..=r).map(move |dx| {
            let ty = y as isize + dy;
            let tx = x as isize + dx;
            let ok_y = (0..height as isize).contains(&ty).then_some(ty as usize);
            let ok_x = (0..width as isize).contains(&tx).then_some(tx as usize);
            (ok_y, ok_x)
        })
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, zeros when it did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(var.value().shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(point: Tensor, f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) {
        let report = grad_check(|_, x| f(x), &point, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let w = random(&[4, 3], 1);
        check(random(&[2, 4], 2), |x| {
            let w = x.tape().leaf(w.clone());
            x.matmul(w)?.transpose()?.square()?.sum_all()
        });
        let a = random(&[2, 4], 3);
        check(random(&[4, 3], 4), |x| x.tape().leaf(a.clone()).matmul(x)?.gelu()?.sum_all());
    }

    #[test]
    fn elementwise_gradients() {
        let c = random(&[3, 2], 5);
        check(random(&[3, 2], 6), |x| {
            let c = x.tape().leaf(c.clone());
            x.mul(c)?.add(x)?.sub(c)?.exp()?.scale(0.5)?.add_scalar(2.0)?.ln()?.mean_all()
        });
        check(random(&[3, 2], 7).map("shift", |v| v + 2.0).unwrap(), |x| x.sqrt()?.sum_all());
    }

    #[test]
    fn row_and_reduction_gradients() {
        let b = random(&[3], 8);
        check(random(&[4, 3], 9), |x| {
            let b = x.tape().leaf(b.clone());
            let s = x.square()?.sum_rows()?.add_scalar(0.5)?;
            x.add_row(b)?.div_rows(s)?.square()?.sum_all()
        });
    }

    #[test]
    fn softmax_gradient_both_axes() {
        let w = random(&[3, 5], 10);
        for axis in 0..2 {
            check(random(&[3, 5], 11), |x| {
                x.softmax(axis)?.mul(x.tape().leaf(w.clone()))?.sum_all()
            });
        }
    }

    #[test]
    fn masked_softmax_excludes_and_differentiates() {
        let tape = Tape::new();
        let x = tape.leaf(random(&[2, 3], 12));
        let mask = [true, false, true, false, true, false];
        let y = x.masked_softmax_rows(&mask).unwrap().value();
        assert_eq!(y.at2(0, 1), 0.0);
        assert_eq!(y.at2(1, 1), 1.0);
        assert_eq!(y.at2(1, 0), 0.0);

        let w = random(&[2, 3], 13);
        check(random(&[2, 3], 14), |x| {
            x.masked_softmax_rows(&mask)?.mul(x.tape().leaf(w.clone()))?.sum_all()
        });

        let none = [false; 6];
        assert!(matches!(x.masked_softmax_rows(&none), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_gradient() {
        let w = random(&[4, 6], 15);
        check(random(&[4, 6], 16), |x| {
            let t = x.tape();
            let g = t.leaf(random(&[6], 17));
            let b = t.leaf(random(&[6], 18));
            x.layer_norm(g, b)?.mul(t.leaf(w.clone()))?.sum_all()
        });
        // gain and shift
        let x0 = random(&[4, 6], 19);
        check(random(&[6], 20), |g| {
            let t = g.tape();
            let b = t.leaf(random(&[6], 21));
            t.leaf(x0.clone()).layer_norm(g, b)?.square()?.sum_all()
        });
    }

    #[test]
    fn rearrangement_gradients() {
        let index = Rc::new(vec![5, 0, GATHER_ZERO, 3, 3, 1]);
        check(random(&[2, 3], 22), |x| {
            x.gather(Rc::clone(&index), &[3, 2])?.square()?.reshape(&[6])?.sum_all()
        });
        let groups = Rc::new(vec![vec![0, 1], vec![2], vec![1, 2, 3]]);
        check(random(&[4, 2], 23), |x| x.group_mean_rows(Rc::clone(&groups))?.square()?.sum_all());
        let other = random(&[4, 1], 24);
        check(random(&[4, 2], 25), |x| {
            Var::concat_cols(&[x, x.tape().leaf(other.clone()), x])?.square()?.sum_all()
        });
    }

    #[test]
    fn normalize_and_correlation_gradients() {
        check(random(&[5, 3], 26), |x| x.row_normalize()?.square()?.sum_rows()?.mul(x.sum_rows()?)?.sum_all());
        let b = random(&[12, 4], 27);
        let w = random(&[12, 9], 28);
        check(random(&[12, 4], 29), |a| {
            let t = a.tape();
            a.local_correlation(t.leaf(b.clone()), 3, 4, 1)?.mul(t.leaf(w.clone()))?.sum_all()
        });
        let a0 = random(&[12, 4], 30);
        check(random(&[12, 4], 31), |b| {
            let t = b.tape();
            t.leaf(a0.clone()).local_correlation(b, 3, 4, 1)?.square()?.sum_all()
        });
    }

    #[test]
    fn correlation_matches_direct_sum() {
        let tape = Tape::new();
        let a = tape.leaf(random(&[6, 2], 32));
        let b = tape.leaf(random(&[6, 2], 33));
        let c = a.local_correlation(b, 2, 3, 1).unwrap().value();
        let (av, bv) = (a.value(), b.value());
        // token (1, 1) against neighbour (0, 2): offset (-1, +1) -> index 2
        let expect = av.at2(4, 0) * bv.at2(2, 0) + av.at2(4, 1) * bv.at2(2, 1);
        assert_eq!(c.at2(4, 2), expect);
        // token (0, 0) has no upper neighbours
        assert_eq!(c.at2(0, 0), 0.0);
        assert_eq!(c.at2(0, 1), 0.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(random(&[2], 34));
        let unused = tape.leaf(random(&[3], 35));
        let loss = x.square().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[3]));
        assert!(g.wrt(x).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(random(&[2], 36));
        assert!(x.backward().is_err());
    }
}
