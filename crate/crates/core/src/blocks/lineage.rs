//! Reference blocks the modulation design is compared against.

use rand::Rng;

use super::{expect_channels, ConvLayer};
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;

/// Visual-attention-network block: `p(g(dw₇,₃(dw₅,₁(f(x)))) ⊙ f(x))` with
/// `f` a projection followed by GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct VanParams {
    pub c: usize,
    pub f: ConvLayer,
    pub dw5: ConvLayer,
    pub dw7: ConvLayer,
    pub g: ConvLayer,
    pub p: ConvLayer,
}

impl VanParams {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            c,
            f: ConvLayer::pointwise(pb, &format!("{name}.f"), c, c)?,
            dw5: ConvLayer::depthwise(pb, &format!("{name}.dw5"), c, 5, 1)?,
            dw7: ConvLayer::depthwise(pb, &format!("{name}.dw7"), c, 7, 3)?,
            g: ConvLayer::pointwise(pb, &format!("{name}.g"), c, c)?,
            p: ConvLayer::pointwise(pb, &format!("{name}.p"), c, c)?,
        })
    }
}

/// `g(dw₇,₃(dw₅,₁(h)))` applied to an already projected feature `h`.
pub fn van_context<B: Backend>(b: &mut B, h: &B::Value, p: &VanParams) -> Result<B::Value> {
    let y = p.dw5.forward(b, h)?;
    let y = p.dw7.forward(b, &y)?;
    p.g.forward(b, &y)
}

pub fn van_block<B: Backend>(b: &mut B, x: &B::Value, p: &VanParams) -> Result<B::Value> {
    expect_channels(b, x, p.c, "van_block")?;
    let fx = p.f.forward(b, x)?;
    let fx = b.gelu(&fx)?;
    let ctx = van_context(b, &fx, p)?;
    let m = b.mul(&ctx, &fx)?;
    p.p.forward(b, &m)
}

/// Hierarchical focal context without the global-pooling level.
///
/// Each level convolves `f(x)` directly (levels are not nested) and is gated
/// by one scalar map per level from `z`, broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalParams {
    pub c: usize,
    pub f: ConvLayer,
    pub levels: Vec<ConvLayer>,
    /// `c → L` projection; channel `l` gates level `l`.
    pub z: ConvLayer,
    pub g: ConvLayer,
}

impl FocalParams {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        kernels: &[usize],
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Config(format!("{name}: focal context needs at least one level")));
        }
        if kernels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "{name}: level kernels must be strictly increasing, got {kernels:?}"
            )));
        }
        let f = ConvLayer::pointwise(pb, &format!("{name}.f"), c, c)?;
        let levels = kernels
            .iter()
            .enumerate()
            .map(|(l, &k)| ConvLayer::depthwise(pb, &format!("{name}.level{l}"), c, k, 1))
            .collect::<Result<Vec<_>>>()?;
        let z = ConvLayer::pointwise(pb, &format!("{name}.z"), c, kernels.len())?;
        let g = ConvLayer::pointwise(pb, &format!("{name}.g"), c, c)?;
        Ok(Self { c, f, levels, z, g })
    }
}

/// `g(Σ_l gelu(dw_l(f(x))) ⊙ z_l(f(x)))`.
pub fn focal_ctx<B: Backend>(b: &mut B, x: &B::Value, p: &FocalParams) -> Result<B::Value> {
    if p.levels.is_empty() {
        return Err(Error::Config("focal context with zero levels".into()));
    }
    expect_channels(b, x, p.c, "focal_ctx")?;
    let fx = p.f.forward(b, x)?;
    let gates = p.z.forward(b, &fx)?;
    let mut acc: Option<B::Value> = None;
    for (l, level) in p.levels.iter().enumerate() {
        let h = level.forward(b, &fx)?;
        let h = b.gelu(&h)?;
        let gate = b.slice_channels(&gates, l, 1)?;
        let term = b.mul_broadcast(&h, &gate)?;
        acc = Some(match acc {
            None => term,
            Some(a) => b.add(&a, &term)?,
        });
    }
    let acc = acc.expect("at least one level");
    p.g.forward(b, &acc)
}

/// Inverted bottleneck: expand `c → r·c`, depthwise at `r·c`, GELU, squeeze
/// back to `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct MbConvParams {
    pub c: usize,
    pub r: usize,
    pub k: usize,
    pub expand: ConvLayer,
    pub dw: ConvLayer,
    pub squeeze: ConvLayer,
}

impl MbConvParams {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        r: usize,
        k: usize,
    ) -> Result<Self> {
        if c == 0 || r == 0 {
            return Err(Error::Config(format!("{name}: c and r must be positive")));
        }
        Ok(Self {
            c,
            r,
            k,
            expand: ConvLayer::pointwise(pb, &format!("{name}.expand"), c, r * c)?,
            dw: ConvLayer::depthwise(pb, &format!("{name}.dw"), r * c, k, 1)?,
            squeeze: ConvLayer::pointwise(pb, &format!("{name}.squeeze"), r * c, c)?,
        })
    }
}

pub fn mbconv_block<B: Backend>(b: &mut B, x: &B::Value, p: &MbConvParams) -> Result<B::Value> {
    expect_channels(b, x, p.c, "mbconv_block")?;
    let h = p.expand.forward(b, x)?;
    let h = p.dw.forward(b, &h)?;
    let h = b.gelu(&h)?;
    p.squeeze.forward(b, &h)
}

/// Squeeze-and-excitation: `x · sigmoid(W₂(gelu(W₁(gap(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub c: usize,
    pub reduction: usize,
    pub w1: ConvLayer,
    pub w2: ConvLayer,
}

impl SeParams {
    pub const DEFAULT_REDUCTION: usize = 4;

    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !c.is_multiple_of(reduction) || c / reduction == 0 {
            return Err(Error::Config(format!(
                "{name}: reduction {reduction} does not divide {c} channels"
            )));
        }
        let hidden = c / reduction;
        Ok(Self {
            c,
            reduction,
            w1: ConvLayer::pointwise(pb, &format!("{name}.w1"), c, hidden)?,
            w2: ConvLayer::pointwise(pb, &format!("{name}.w2"), hidden, c)?,
        })
    }
}

pub fn se_block<B: Backend>(b: &mut B, x: &B::Value, p: &SeParams) -> Result<B::Value> {
    expect_channels(b, x, p.c, "se_block")?;
    let s = b.global_avg_pool(x)?;
    let s = p.w1.forward(b, &s)?;
    let s = b.gelu(&s)?;
    let s = p.w2.forward(b, &s)?;
    let gate = b.sigmoid(&s)?;
    b.mul_broadcast(x, &gate)
}
