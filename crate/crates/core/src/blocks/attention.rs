use rand::Rng;

use super::{drop_path, expect_channels, ConvLayer, Norm, RunCtx};
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};

/// Pre-norm transformer block over the spatial positions of an NCHW map.
///
/// Tokens are the `h·w` positions and channels are the embedding, so the
/// 1×1 convolutions are the usual per-token linear layers. No positional
/// embedding is added.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub c: usize,
    pub heads: usize,
    pub hidden: usize,
    pub norm1: Norm,
    pub qkv: ConvLayer,
    pub proj: ConvLayer,
    pub norm2: Norm,
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
    pub layer_scale1: Option<ParamId>,
    pub layer_scale2: Option<ParamId>,
    pub drop_path: f64,
    pub layer: usize,
}

impl AttentionParams {
    pub const DEFAULT_HEADS: usize = 8;

    /// `hidden` is the MLP width (`m·c` for ratio `m`).
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        heads: usize,
        hidden: usize,
        layer_scale_init: Option<f64>,
        drop_path: f64,
        layer: usize,
    ) -> Result<Self> {
        if heads == 0 || c == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {c} channels are not divisible into {heads} heads"
            )));
        }
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: MLP width must be positive")));
        }
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::Config(format!(
                "{name}: drop-path probability {drop_path} must lie in [0, 1)"
            )));
        }
        let norm1 = Norm::build(pb, &format!("{name}.norm1"), c);
        let qkv = ConvLayer::pointwise(pb, &format!("{name}.attn.qkv"), c, 3 * c)?;
        let proj = ConvLayer::pointwise(pb, &format!("{name}.attn.proj"), c, c)?;
        let layer_scale1 = layer_scale_init.map(|v| pb.layer_scale(&format!("{name}.layer_scale1"), c, v));
        let norm2 = Norm::build(pb, &format!("{name}.norm2"), c);
        let fc1 = ConvLayer::pointwise(pb, &format!("{name}.mlp.fc1"), c, hidden)?;
        let fc2 = ConvLayer::pointwise(pb, &format!("{name}.mlp.fc2"), hidden, c)?;
        let layer_scale2 = layer_scale_init.map(|v| pb.layer_scale(&format!("{name}.layer_scale2"), c, v));
        Ok(Self {
            c,
            heads,
            hidden,
            norm1,
            qkv,
            proj,
            norm2,
            fc1,
            fc2,
            layer_scale1,
            layer_scale2,
            drop_path,
            layer,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }
}

/// Multi-head self-attention on an already normalized input.
pub fn self_attention<B: Backend>(b: &mut B, x: &B::Value, p: &AttentionParams) -> Result<B::Value> {
    let [n, c, h, w] = b.get(x).shape();
    let (heads, d, t) = (p.heads, p.head_dim(), h * w);
    let qkv = p.qkv.forward(b, x)?;
    let split = |b: &mut B, i: usize| -> Result<B::Value> {
        let s = b.slice_channels(&qkv, i * c, c)?;
        b.reshape(&s, [n, heads, d, t])
    };
    let q = split(b, 0)?;
    let k = split(b, 1)?;
    let v = split(b, 2)?;
    // scores[i, j] = q_i · k_j over the head dimension
    let scores = b.matmul(&q, &k, true, false)?;
    let scores = b.scale(&scores, 1.0 / (d as f64).sqrt())?;
    let attn = b.softmax_last(&scores)?;
    // out[:, i] = Σ_j attn[i, j] v_j
    let out = b.matmul(&v, &attn, false, true)?;
    let out = b.reshape(&out, [n, c, h, w])?;
    p.proj.forward(b, &out)
}

fn residual<B: Backend>(
    b: &mut B,
    x: &B::Value,
    branch: B::Value,
    scale: Option<ParamId>,
    p: &AttentionParams,
    slot: usize,
    run: &RunCtx,
) -> Result<B::Value> {
    let mut y = branch;
    if let Some(ls) = scale {
        let s = b.param(ls);
        y = b.mul_broadcast(&y, &s)?;
    }
    // Both residual branches of one block draw independent masks.
    let y = drop_path(b, &y, p.drop_path, 2 * p.layer + slot, run)?;
    b.add(x, &y)
}

pub fn attention_block_with<B: Backend>(
    b: &mut B,
    x: &B::Value,
    p: &AttentionParams,
    run: &RunCtx,
) -> Result<B::Value> {
    expect_channels(b, x, p.c, "attention_block")?;
    let h = p.norm1.forward(b, x)?;
    let a = self_attention(b, &h, p)?;
    let x = residual(b, x, a, p.layer_scale1, p, 0, run)?;
    let h = p.norm2.forward(b, &x)?;
    let h = p.fc1.forward(b, &h)?;
    let h = b.gelu(&h)?;
    let m = p.fc2.forward(b, &h)?;
    residual(b, &x, m, p.layer_scale2, p, 1, run)
}

/// Eval-mode attention block.
pub fn attention_block<B: Backend>(b: &mut B, x: &B::Value, p: &AttentionParams) -> Result<B::Value> {
    attention_block_with(b, x, p, &RunCtx::eval())
}
