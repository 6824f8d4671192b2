//! Dense row-major `f64` tensors and the deterministic kernels everything
//! else is built from.
//!
//! Every constructor and kernel rejects NaN/Inf: a non-finite value is an
//! error, never a silent state. Reductions always accumulate left to right,
//! so identical inputs give bit-identical outputs.

use std::fmt;

use crate::error::{Error, Result};

/// Per-thread tally of multiply-accumulates performed by [`Tensor::matmul`].
///
/// Only matrix products are counted; elementwise work, pooling and
/// normalisation are not.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        COUNT.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }

    /// Runs `f` and returns its result with the MACs it performed.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = count();
        let out = f();
        (out, count() - before)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {len} values, got {}", data.len()),
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already guarantee the shape.
    pub(crate) fn from_parts(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(&[values.len()], values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op: "dims2",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[self.rank() - 1];
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Self::from_parts(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_parts(op, self.shape.clone(), data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rounds every value through `f32`, the checkpoint payload precision.
    pub fn round_to_f32(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Matrix product with a fixed left-to-right accumulation over the inner
    /// extent. Each output entry sees exactly the sequence
    /// `((0 + a0*b0) + a1*b1) + ...`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (m, k) = self.dims2().map_err(|_| shape_err())?;
        let (k2, n) = other.dims2().map_err(|_| shape_err())?;
        if k != k2 {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        macs::add((m * k * n) as u64);
        Self::from_parts("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| self.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Self::from_parts("softmax", self.shape.clone(), out)
    }

    /// Normalises each vector along the last axis to zero mean and unit
    /// variance, then applies `gain` and `shift`.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let d = *self.shape.last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for p in [gain, shift] {
            if p.shape != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for (x, y) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv_std) = moments(x);
            for j in 0..d {
                y[j] = gain.data[j] * (x[j] - mean) * inv_std + shift.data[j];
            }
        }
        Self::from_parts("layer_norm", self.shape.clone(), out)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean and `1/sqrt(var + eps)` of one token.
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `(outer, axis extent, inner)` strides for iterating along one axis.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
