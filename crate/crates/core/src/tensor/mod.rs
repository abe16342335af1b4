//! Dense row-major `f64` tensors and the reverse-mode tape built on them.
//!
//! A [`Tensor`] is plain data. Differentiation happens on a [`Tape`]: every
//! value that takes part in a forward pass is recorded as a node, addressed
//! through a copyable [`Var`] handle, and [`Tape::backward`] replays the
//! recorded operations in reverse.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, numeric_gradients, GradCheckReport, DEFAULT_EPSILON,
};
pub use tape::{Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Dense tensor. `data.len()` always equals the product of `shape`; a
/// rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees `numel(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(f).collect();
        Self::from_parts(shape, data)
    }

    /// Samples from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    /// Samples uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rounds every element to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` laid against `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Walks `out` in row-major order, yielding the matching flat offsets into
/// two broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for k in 0..n {
        f(k, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape =
        broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let n = numel(&out_shape);
    let data: Vec<f64> = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if b.data.len() == 1 {
        let y = b.data[0];
        if a.shape == out_shape {
            a.data.iter().map(|&x| f(x, y)).collect()
        } else {
            let mut v = Vec::with_capacity(n);
            let sa = broadcast_strides(&a.shape, &out_shape);
            let zeros = vec![0; out_shape.len()];
            for_each_broadcast(&out_shape, &sa, &zeros, |_, ia, _| v.push(f(a.data[ia], y)));
            v
        }
    } else if a.shape == out_shape && is_suffix(&b.shape, &a.shape) {
        let m = b.data.len();
        a.data
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if b.shape == out_shape && is_suffix(&a.shape, &b.shape) {
        let m = a.data.len();
        b.data
            .chunks_exact(m)
            .flat_map(|row| a.data.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let sa = broadcast_strides(&a.shape, &out_shape);
        let sb = broadcast_strides(&b.shape, &out_shape);
        let mut v = Vec::with_capacity(n);
        for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| {
            v.push(f(a.data[ia], b.data[ib]))
        });
        v
    };
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums a broadcast result back down to `shape`.
pub(crate) fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = g.data.iter().sum();
    } else if is_suffix(shape, &g.shape) {
        for row in g.data.chunks_exact(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    } else {
        let s = broadcast_strides(shape, &g.shape);
        let zeros = vec![0; g.shape.len()];
        for_each_broadcast(&g.shape, &s, &zeros, |k, i, _| out[i] += g.data[k]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}
