use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{precondition, Error, Result};

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

/// Derivative of exact GELU, `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: &Tensor) -> Tensor {
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    x.map(|v| {
        let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
        let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
        cdf + v * pdf
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Per-position statistics saved by [`layer_norm_with_stats`].
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalization over the channel axis at every `(n, h, w)` position.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let [n, c, h, w] = x.shape();
    precondition!(c > 0, "layer_norm over zero channels");
    precondition!(eps > 0.0, "layer_norm eps must be positive, got {eps}");
    precondition!(
        gamma.len() == c && beta.len() == c,
        "layer_norm affine lengths ({}, {}) do not match {c} channels",
        gamma.len(),
        beta.len()
    );
    let hw = h * w;
    let mut mean = vec![0.0; n * hw];
    let mut rstd = vec![0.0; n * hw];
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        let xs = &xd[ni * c * hw..(ni + 1) * c * hw];
        let m = &mut mean[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            for (acc, &v) in m.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v *= inv_c);
        let r = &mut rstd[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            for ((acc, &v), &mu) in r.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]).zip(m.iter()) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        r.iter_mut().for_each(|v| *v = 1.0 / (*v * inv_c + eps).sqrt());
        let ys = &mut y.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let src = &xs[ci * hw..(ci + 1) * hw];
            let dst = &mut ys[ci * hw..(ci + 1) * hw];
            for p in 0..hw {
                dst[p] = (src[p] - m[p]) * r[p] * g + b;
            }
        }
    }
    Ok((y, NormStats { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)` for [`layer_norm`].
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = x.shape();
    precondition!(dy.shape() == x.shape(), "layer_norm_backward shape mismatch");
    let hw = h * w;
    let inv_c = 1.0 / c as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let (xd, dyd) = (x.data(), dy.data());
    for ni in 0..n {
        let base = ni * c * hw;
        let m = &stats.mean[ni * hw..(ni + 1) * hw];
        let r = &stats.rstd[ni * hw..(ni + 1) * hw];
        // Per-position means of g = dy·γ and g·x̂.
        let mut mean_g = vec![0.0; hw];
        let mut mean_gx = vec![0.0; hw];
        for ci in 0..c {
            let gam = gamma.data()[ci];
            for p in 0..hw {
                let i = base + ci * hw + p;
                let xhat = (xd[i] - m[p]) * r[p];
                let g = dyd[i] * gam;
                mean_g[p] += g;
                mean_gx[p] += g * xhat;
                dgamma[ci] += dyd[i] * xhat;
                dbeta[ci] += dyd[i];
            }
        }
        let dxd = dx.data_mut();
        for ci in 0..c {
            let gam = gamma.data()[ci];
            for p in 0..hw {
                let i = base + ci * hw + p;
                let xhat = (xd[i] - m[p]) * r[p];
                let g = dyd[i] * gam;
                dxd[i] = r[p] * (g - mean_g[p] * inv_c - xhat * mean_gx[p] * inv_c);
            }
        }
    }
    Ok((
        dx,
        Tensor::channel_vector(dgamma),
        Tensor::channel_vector(dbeta),
    ))
}

/// Numerically stable softmax along `axis` (0..4).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    precondition!(axis < 4, "softmax axis {axis} out of range");
    let shape = x.shape();
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = x.clone();
    if len == 0 {
        return Ok(y);
    }
    let yd = y.data_mut();
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            let idx = |j: usize| base + j * stride;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(yd[idx(j)]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (yd[idx(j)] - mx).exp();
                yd[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                yd[idx(j)] /= total;
            }
        }
    }
    Ok(y)
}

/// Backward of softmax along the last axis, from the forward output `y`.
pub fn softmax_backward_last(y: &Tensor, dy: &Tensor) -> Tensor {
    let len = y.w().max(1);
    let mut dx = Tensor::zeros(y.shape());
    for ((dst, ys), ds) in dx
        .data_mut()
        .chunks_mut(len)
        .zip(y.data().chunks(len))
        .zip(dy.data().chunks(len))
    {
        let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
        for j in 0..ys.len() {
            dst[j] = ys[j] * (ds[j] - dot);
        }
    }
    dx
}

/// Matrix product over a `[b0, b1]` batch of matrices held in the last two
/// axes, `op(a) · op(b)` with optional transposes.
pub fn batched_matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let [a0, a1, ar, ac] = a.shape();
    let [b0, b1, br, bc] = b.shape();
    precondition!(
        a0 == b0 && a1 == b1,
        "matmul batch extents differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, nn) = if trans_b { (bc, br) } else { (br, bc) };
    precondition!(
        ka == kb,
        "matmul inner dimensions differ: {ka} vs {kb} (shapes {:?}, {:?})",
        a.shape(),
        b.shape()
    );
    let k = ka;
    let mut out = Tensor::zeros([a0, a1, m, nn]);
    let (asz, bsz, osz) = (ar * ac, br * bc, m * nn);
    if osz == 0 {
        return Ok(out);
    }
    let (ad, bd) = (a.data(), b.data());
    out.data_mut()
        .par_chunks_mut(osz)
        .enumerate()
        .for_each(|(bi, dst)| {
            let am = &ad[bi * asz..(bi + 1) * asz];
            let bm = &bd[bi * bsz..(bi + 1) * bsz];
            for i in 0..m {
                let row = &mut dst[i * nn..(i + 1) * nn];
                for p in 0..k {
                    let av = if trans_a { am[p * ac + i] } else { am[i * ac + p] };
                    if trans_b {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += av * bm[j * bc + p];
                        }
                    } else {
                        let brow = &bm[p * bc..(p + 1) * bc];
                        for (o, &bv) in row.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// How a `c`-channel context is broadcast over an `r·c`-channel value tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Materialize the context tiled `r` times along channels, then combine.
    Repeat,
    /// Combine through an `(r, c)` view of the value channels without tiling.
    Reshape,
}

/// The binary operation joining context and value branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseOp {
    /// Element-wise product (modulation).
    Mul,
    /// Element-wise sum, the ablation variant.
    Sum,
}

impl FuseOp {
    #[inline]
    fn apply(self, v: f64, ctx: f64) -> f64 {
        match self {
            FuseOp::Mul => v * ctx,
            FuseOp::Sum => v + ctx,
        }
    }
}

fn fuse_ratio(ctx: &Tensor, v: &Tensor) -> Result<usize> {
    let [cn, cc, ch, cw] = ctx.shape();
    let [vn, vc, vh, vw] = v.shape();
    precondition!(
        cn == vn && ch == vh && cw == vw,
        "fuse: batch/spatial extents differ: ctx {:?} vs value {:?}",
        ctx.shape(),
        v.shape()
    );
    precondition!(
        cc > 0 && vc % cc == 0,
        "fuse: value channels {vc} are not a multiple of context channels {cc}"
    );
    Ok(vc / cc)
}

fn repeat_channels(ctx: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = ctx.shape();
    let block = c * h * w;
    let mut data = Vec::with_capacity(n * r * block);
    for ni in 0..n {
        let src = &ctx.data()[ni * block..(ni + 1) * block];
        for _ in 0..r {
            data.extend_from_slice(src);
        }
    }
    Tensor::new([n, r * c, h, w], data).expect("repeat shape")
}

/// Modulates `v` (`[n, r·c, h, w]`) by `ctx` (`[n, c, h, w]`): output channel
/// `i` is `v[i] · ctx[i mod c]`. Both modes give bit-identical results.
pub fn fuse_modulate(ctx: &Tensor, v: &Tensor, mode: FusionMode) -> Result<Tensor> {
    fuse_with(ctx, v, mode, FuseOp::Mul)
}

/// [`fuse_modulate`] generalized over the joining operation.
pub fn fuse_with(ctx: &Tensor, v: &Tensor, mode: FusionMode, op: FuseOp) -> Result<Tensor> {
    let r = fuse_ratio(ctx, v)?;
    let mut out = Tensor::zeros(v.shape());
    match mode {
        FusionMode::Repeat => {
            let tiled = repeat_channels(ctx, r);
            for ((o, &a), &b) in out.data_mut().iter_mut().zip(v.data()).zip(tiled.data()) {
                *o = op.apply(a, b);
            }
        }
        FusionMode::Reshape => {
            let [n, c, h, w] = ctx.shape();
            let block = c * h * w;
            let (vd, cd) = (v.data(), ctx.data());
            let od = out.data_mut();
            for ni in 0..n {
                let cs = &cd[ni * block..(ni + 1) * block];
                for j in 0..r {
                    let base = (ni * r + j) * block;
                    for (i, &cv) in cs.iter().enumerate() {
                        od[base + i] = op.apply(vd[base + i], cv);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dctx, dv)` for [`fuse_with`]. The fold over the `r` copies runs
/// in the same order for both modes, so gradients are mode-independent.
pub fn fuse_backward(
    ctx: &Tensor,
    v: &Tensor,
    dy: &Tensor,
    mode: FusionMode,
    op: FuseOp,
) -> Result<(Tensor, Tensor)> {
    let r = fuse_ratio(ctx, v)?;
    precondition!(dy.shape() == v.shape(), "fuse_backward: gradient shape mismatch");
    let [n, c, h, w] = ctx.shape();
    let block = c * h * w;
    let mut dctx = Tensor::zeros(ctx.shape());
    let mut dv = Tensor::zeros(v.shape());
    let dyd = dy.data();
    match mode {
        FusionMode::Repeat => {
            let tiled = repeat_channels(ctx, r);
            let mut dtiled = Tensor::zeros(v.shape());
            for i in 0..v.len() {
                let (a, b, g) = (v.data()[i], tiled.data()[i], dyd[i]);
                match op {
                    FuseOp::Mul => {
                        dv.data_mut()[i] = g * b;
                        dtiled.data_mut()[i] = g * a;
                    }
                    FuseOp::Sum => {
                        dv.data_mut()[i] = g;
                        dtiled.data_mut()[i] = g;
                    }
                }
            }
            let dt = dtiled.data();
            let dc = dctx.data_mut();
            for ni in 0..n {
                for i in 0..block {
                    let mut acc = 0.0;
                    for j in 0..r {
                        acc += dt[(ni * r + j) * block + i];
                    }
                    dc[ni * block + i] = acc;
                }
            }
        }
        FusionMode::Reshape => {
            let (vd, cd) = (v.data(), ctx.data());
            for ni in 0..n {
                for i in 0..block {
                    let cv = cd[ni * block + i];
                    let mut acc = 0.0;
                    for j in 0..r {
                        let k = (ni * r + j) * block + i;
                        let g = dyd[k];
                        match op {
                            FuseOp::Mul => {
                                dv.data_mut()[k] = g * cv;
                                acc += g * vd[k];
                            }
                            FuseOp::Sum => {
                                dv.data_mut()[k] = g;
                                acc += g;
                            }
                        }
                    }
                    dctx.data_mut()[ni * block + i] = acc;
                }
            }
        }
    }
    Ok((dctx, dv))
}

/// Spatial mean per channel, `[n, c, h, w] → [n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    precondition!(h * w > 0, "global_avg_pool over an empty spatial extent");
    let inv = 1.0 / (h * w) as f64;
    let data = (0..n * c)
        .map(|i| x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() * inv)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Mul,
    Add,
}

/// Point-wise product or sum of two equally shaped tensors.
pub fn elementwise(a: &Tensor, b: &Tensor, op: ElemOp) -> Result<Tensor> {
    precondition!(
        a.shape() == b.shape(),
        "elementwise shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            ElemOp::Mul => x * y,
            ElemOp::Add => x + y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

fn broadcast_ok(full: Shape, small: Shape) -> bool {
    full.iter().zip(&small).all(|(&f, &s)| s == f || s == 1)
}

/// `x ⊙ s` where every axis of `s` either matches `x` or has extent 1.
pub fn mul_broadcast(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    precondition!(
        broadcast_ok(x.shape(), s.shape()),
        "cannot broadcast {:?} onto {:?}",
        s.shape(),
        x.shape()
    );
    let [n, c, h, w] = x.shape();
    let ss = s.shape();
    let mut out = Tensor::zeros(x.shape());
    let (xd, sd) = (x.data(), s.data());
    let od = out.data_mut();
    let mut i = 0;
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                for z in 0..w {
                    let si = s.offset(
                        if ss[0] == 1 { 0 } else { a },
                        if ss[1] == 1 { 0 } else { b },
                        if ss[2] == 1 { 0 } else { y },
                        if ss[3] == 1 { 0 } else { z },
                    );
                    od[i] = xd[i] * sd[si];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Sums `t` over every axis where `shape` has extent 1 (the adjoint of
/// broadcasting).
pub fn reduce_to_shape(t: &Tensor, shape: Shape) -> Result<Tensor> {
    precondition!(
        broadcast_ok(t.shape(), shape),
        "cannot reduce {:?} to {:?}",
        t.shape(),
        shape
    );
    let mut out = Tensor::zeros(shape);
    let [n, c, h, w] = t.shape();
    let mut i = 0;
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                for z in 0..w {
                    let oi = out.offset(
                        if shape[0] == 1 { 0 } else { a },
                        if shape[1] == 1 { 0 } else { b },
                        if shape[2] == 1 { 0 } else { y },
                        if shape[3] == 1 { 0 } else { z },
                    );
                    out.data_mut()[oi] += t.data()[i];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Channels `start..start+len` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    precondition!(
        start + len <= c,
        "channel slice {start}..{} out of range for {c} channels",
        start + len
    );
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        data.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::new([n, len, h, w], data)
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.sum())
}

/// Mean softmax cross-entropy of `logits` (`[n, k, 1, 1]`) against integer
/// labels. Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    precondition!(h == 1 && w == 1, "logits must be [n, k, 1, 1], got {:?}", logits.shape());
    precondition!(labels.len() == n, "{} labels for batch of {n}", labels.len());
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax(logits, 1)?;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs.data()[i * k + l].max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        / n.max(1) as f64;
    Ok((loss, probs))
}
