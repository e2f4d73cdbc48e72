//! Dense NCHW tensors and the forward/backward numerical kernels built on them.
//!
//! Every kernel is a pure function of its inputs. Data-parallel loops hand
//! each output element to exactly one worker and fix the reduction order
//! inside it, so results do not depend on the size of the rayon pool.

mod conv;
mod ops;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use ops::{
    batched_matmul, cross_entropy, elementwise, fuse_backward, fuse_modulate, fuse_with, gelu,
    gelu_grad, global_avg_pool, layer_norm, layer_norm_backward, layer_norm_with_stats,
    mul_broadcast, reduce_to_shape, sigmoid, slice_channels, softmax, softmax_backward_last,
    sum_all, ElemOp, FuseOp, FusionMode, NormStats,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{precondition, Error, Result};

/// Extents of a 4-D tensor in (batch, channel, height, width) order.
pub type Shape = [usize; 4];

/// Number of scalars held by a tensor of the given shape.
pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Dense, contiguous, row-major NCHW array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        precondition!(
            data.len() == numel(shape),
            "data length {} does not match shape {:?} ({} elements)",
            data.len(),
            shape,
            numel(shape)
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    /// A `[1, 1, 1, 1]` tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(shape));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// A length-`c` vector laid out as `[1, c, 1, 1]`, the shape used for
    /// biases, norm affines and layer scales.
    pub fn channel_vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(lo, hi).expect("uniform bounds");
        Self {
            shape,
            data: (0..numel(shape)).map(|_| dist.sample(rng)).collect(),
        }
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..numel(shape))
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// The `h × w` plane at `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        precondition!(
            numel(shape) == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        precondition!(self.data.len() == 1, "item() on tensor of shape {:?}", self.shape);
        Ok(self.data[0])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `what` when any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {i} of {:?}",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        precondition!(
            self.shape == other.shape,
            "add_assign shape mismatch: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over shape and element bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &s in &self.shape {
            eat(s as u64);
        }
        for v in &self.data {
            eat(v.to_bits());
        }
        h
    }
}
