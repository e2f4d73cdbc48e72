//! Forward definitions of the modulation block and its lineage.
//!
//! Every block is generic over [`Backend`], so the same definition serves
//! inference, training and gradient checking.

mod attention;
mod effmod;
mod lineage;

pub use attention::{attention_block, attention_block_with, self_attention, AttentionParams};
pub use effmod::{efficient_mod_block, efficient_mod_context, EfficientModParams};
pub use lineage::{
    focal_ctx, mbconv_block, se_block, van_block, van_context, FocalParams, MbConvParams,
    SeParams, VanParams,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{ConvSpec, Tensor};

/// Default LayerNorm epsilon.
pub const NORM_EPS: f64 = 1e-6;

/// A convolution bound to its weight and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.groups == 0 || !c_in.is_multiple_of(spec.groups) || !c_out.is_multiple_of(spec.groups) {
            return Err(Error::Config(format!(
                "{name}: groups {} must divide channels {c_in} -> {c_out}",
                spec.groups
            )));
        }
        let weight = pb.weight(
            &format!("{name}.weight"),
            [c_out, c_in / spec.groups, spec.kernel, spec.kernel],
        );
        let bias = pb.bias(&format!("{name}.bias"), c_out);
        Ok(Self {
            weight,
            bias,
            spec,
            c_in,
            c_out,
        })
    }

    /// 1×1 projection, the fully-connected layer of NCHW features.
    pub fn pointwise<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Self::build(pb, name, c_in, c_out, ConvSpec::pointwise())
    }

    pub fn depthwise<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::build(pb, name, c, c, ConvSpec::depthwise(kernel, dilation, c)?)
    }

    /// Strided patch embedding; requires `stride ≤ kernel`.
    pub fn patch<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || stride > kernel {
            return Err(Error::Config(format!(
                "{name}: patch stride {stride} must be in 1..={kernel}"
            )));
        }
        Self::build(pb, name, c_in, c_out, ConvSpec::new(kernel, stride, padding))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        b.conv2d(x, &w, bias.as_ref(), &self.spec)
    }

    /// Weight elements per output position (`c_out · c_in/groups · k²`).
    pub fn macs_per_position(&self) -> usize {
        self.c_out * (self.c_in / self.spec.groups) * self.spec.kernel * self.spec.kernel
    }
}

/// Overlapped patch embedding (a strided convolution).
pub fn patch_embed<B: Backend>(b: &mut B, x: &B::Value, layer: &ConvLayer) -> Result<B::Value> {
    layer.forward(b, x)
}

/// Channel LayerNorm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, c: usize) -> Self {
        let (gamma, beta) = pb.norm(name, c);
        Self {
            gamma,
            beta,
            eps: NORM_EPS,
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let g = b.param(self.gamma);
        let be = b.param(self.beta);
        b.layer_norm(x, &g, &be, self.eps)
    }
}

/// Mode flags for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunCtx {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl RunCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            training: true,
            seed,
            step,
        }
    }
}

/// Mixes the drop-path stream key so each (seed, layer, step) gets an
/// independent, reproducible RNG.
fn drop_path_rng(seed: u64, layer: usize, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for part in [layer as u64, step] {
        z = z.wrapping_add(part).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Per-sample survivor mask `[n, 1, 1, 1]`: `1/(1−p)` with probability `1−p`,
/// else 0.
pub fn drop_path_mask(n: usize, prob: f64, seed: u64, layer: usize, step: u64) -> Tensor {
    let mut rng = drop_path_rng(seed, layer, step);
    let keep = 1.0 - prob;
    Tensor::from_fn([n, 1, 1, 1], |_, _, _, _| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Stochastic depth. Identity in eval mode or when `prob == 0`.
pub fn drop_path<B: Backend>(
    b: &mut B,
    x: &B::Value,
    prob: f64,
    layer: usize,
    run: &RunCtx,
) -> Result<B::Value> {
    if !run.training || prob == 0.0 {
        return Ok(x.clone());
    }
    let n = b.get(x).n();
    let mask = b.constant(drop_path_mask(n, prob, run.seed, layer, run.step));
    b.mul_broadcast(x, &mask)
}

/// Pre-norm residual wrapper: `x + drop_path(layer_scale ⊙ inner(norm(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualWrap {
    pub norm: Norm,
    pub layer_scale: Option<ParamId>,
    pub drop_path: f64,
    /// Global block index keying the drop-path stream.
    pub layer: usize,
}

impl ResidualWrap {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        layer_scale_init: Option<f64>,
        drop_path: f64,
        layer: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::Config(format!(
                "{name}: drop-path probability {drop_path} must lie in [0, 1)"
            )));
        }
        let norm = Norm::build(pb, &format!("{name}.norm"), c);
        let layer_scale = layer_scale_init.map(|v| pb.layer_scale(&format!("{name}.layer_scale"), c, v));
        Ok(Self {
            norm,
            layer_scale,
            drop_path,
            layer,
        })
    }

    pub fn forward<B, F>(&self, b: &mut B, x: &B::Value, run: &RunCtx, inner: F) -> Result<B::Value>
    where
        B: Backend,
        F: FnOnce(&mut B, &B::Value) -> Result<B::Value>,
    {
        let h = self.norm.forward(b, x)?;
        let mut y = inner(b, &h)?;
        if let Some(ls) = self.layer_scale {
            let s = b.param(ls);
            y = b.mul_broadcast(&y, &s)?;
        }
        let y = drop_path(b, &y, self.drop_path, self.layer, run)?;
        b.add(x, &y)
    }
}

pub(crate) fn expect_channels<B: Backend>(b: &B, x: &B::Value, c: usize, what: &str) -> Result<()> {
    let got = b.get(x).c();
    if got != c {
        return Err(Error::Precondition(format!(
            "{what}: input has {got} channels, block expects {c}"
        )));
    }
    Ok(())
}
