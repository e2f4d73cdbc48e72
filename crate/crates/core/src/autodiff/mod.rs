//! Execution backends and reverse-mode differentiation.
//!
//! Blocks and models are written once against [`Backend`]. [`Eager`] runs the
//! tensor kernels directly for inference; [`Tape`] runs the same kernels while
//! recording a node per operation so [`Tape::backward`] can propagate
//! gradients. Both call identical kernels in identical order, so their
//! forward values agree bit for bit.

mod finite_diff;
mod gradcheck;
mod tape;

use std::borrow::Cow;

pub use finite_diff::finite_diff_grad;
pub use gradcheck::{
    check_gradients, grad_check, grad_check_seeded, grad_check_shapes, rel_err, BlockKind,
    BlockUnderTest, GradCheckReport, GradObjective, ParamCheck, REL_ERR_FLOOR,
};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{self, ConvSpec, ElemOp, FuseOp, FusionMode, Shape, Tensor};

/// The operation set every block is composed from.
pub trait Backend {
    type Value: Clone;

    /// Forward value behind a handle.
    fn get<'v>(&'v self, v: &'v Self::Value) -> &'v Tensor;
    fn params(&self) -> &ParamSet;
    fn param(&mut self, id: ParamId) -> Self::Value;
    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        spec: &ConvSpec,
    ) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `x ⊙ s` with `s` broadcast along its unit axes.
    fn mul_broadcast(&mut self, x: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    fn fuse(
        &mut self,
        ctx: &Self::Value,
        v: &Self::Value,
        mode: FusionMode,
        op: FuseOp,
    ) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, alpha: f64) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: Shape) -> Result<Self::Value>;
    fn matmul(
        &mut self,
        a: &Self::Value,
        b: &Self::Value,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Self::Value>;
    /// Softmax over the last axis.
    fn softmax_last(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Sum of all elements as a `[1, 1, 1, 1]` value.
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Mean softmax cross-entropy of `[n, k, 1, 1]` logits.
    fn cross_entropy(&mut self, logits: &Self::Value, labels: &[usize]) -> Result<Self::Value>;
}

/// Rejects non-finite kernel outputs in validation (debug-assertion) builds.
#[inline]
pub(crate) fn checked(t: Tensor, op: &str) -> Result<Tensor> {
    if cfg!(debug_assertions) {
        t.check_finite(op)?;
    }
    Ok(t)
}

/// Direct evaluation with borrowed parameters.
pub struct Eager<'a> {
    params: &'a ParamSet,
}

impl<'a> Eager<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self { params }
    }

    /// Borrows an input without copying it.
    pub fn input(&self, t: &'a Tensor) -> Cow<'a, Tensor> {
        Cow::Borrowed(t)
    }
}

type Cv<'a> = Cow<'a, Tensor>;

impl<'a> Backend for Eager<'a> {
    type Value = Cv<'a>;

    fn get<'v>(&'v self, v: &'v Cv<'a>) -> &'v Tensor {
        v.as_ref()
    }

    fn params(&self) -> &ParamSet {
        self.params
    }

    fn param(&mut self, id: ParamId) -> Cv<'a> {
        Cow::Borrowed(self.params.value(id))
    }

    fn constant(&mut self, t: Tensor) -> Cv<'a> {
        Cow::Owned(t)
    }

    fn conv2d(&mut self, x: &Cv<'a>, w: &Cv<'a>, b: Option<&Cv<'a>>, spec: &ConvSpec) -> Result<Cv<'a>> {
        let y = tensor::conv2d(x, w, b.map(|b| b.as_ref()), spec)?;
        Ok(Cow::Owned(checked(y, "conv2d")?))
    }

    fn gelu(&mut self, x: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::gelu(x), "gelu")?))
    }

    fn sigmoid(&mut self, x: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(tensor::sigmoid(x)))
    }

    fn layer_norm(&mut self, x: &Cv<'a>, gamma: &Cv<'a>, beta: &Cv<'a>, eps: f64) -> Result<Cv<'a>> {
        let y = tensor::layer_norm(x, gamma, beta, eps)?;
        Ok(Cow::Owned(checked(y, "layer_norm")?))
    }

    fn add(&mut self, a: &Cv<'a>, b: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::elementwise(a, b, ElemOp::Add)?, "add")?))
    }

    fn mul(&mut self, a: &Cv<'a>, b: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::elementwise(a, b, ElemOp::Mul)?, "mul")?))
    }

    fn mul_broadcast(&mut self, x: &Cv<'a>, s: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::mul_broadcast(x, s)?, "mul_broadcast")?))
    }

    fn fuse(&mut self, ctx: &Cv<'a>, v: &Cv<'a>, mode: FusionMode, op: FuseOp) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::fuse_with(ctx, v, mode, op)?, "fuse")?))
    }

    fn global_avg_pool(&mut self, x: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(tensor::global_avg_pool(x)?))
    }

    fn scale(&mut self, x: &Cv<'a>, alpha: f64) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(x.scale(alpha), "scale")?))
    }

    fn slice_channels(&mut self, x: &Cv<'a>, start: usize, len: usize) -> Result<Cv<'a>> {
        Ok(Cow::Owned(tensor::slice_channels(x, start, len)?))
    }

    fn reshape(&mut self, x: &Cv<'a>, shape: Shape) -> Result<Cv<'a>> {
        Ok(Cow::Owned(x.as_ref().clone().reshape(shape)?))
    }

    fn matmul(&mut self, a: &Cv<'a>, b: &Cv<'a>, trans_a: bool, trans_b: bool) -> Result<Cv<'a>> {
        let y = tensor::batched_matmul(a, b, trans_a, trans_b)?;
        Ok(Cow::Owned(checked(y, "matmul")?))
    }

    fn softmax_last(&mut self, x: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(checked(tensor::softmax(x, 3)?, "softmax")?))
    }

    fn sum(&mut self, x: &Cv<'a>) -> Result<Cv<'a>> {
        Ok(Cow::Owned(tensor::sum_all(x)))
    }

    fn cross_entropy(&mut self, logits: &Cv<'a>, labels: &[usize]) -> Result<Cv<'a>> {
        let (loss, _) = tensor::cross_entropy(logits, labels)?;
        Ok(Cow::Owned(checked(Tensor::scalar(loss), "cross_entropy")?))
    }
}
