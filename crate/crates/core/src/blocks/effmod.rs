use rand::Rng;

use super::{expect_channels, ConvLayer};
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::{FuseOp, FusionMode};

/// Parameters of one efficient modulation block.
///
/// The context branch `g(gelu(dw(f(x))))` keeps `c` channels throughout; the
/// value branch `v` expands to `r·c` and `p` squeezes the fused result to
/// `c_out`. GELU after the depthwise conv is the only nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct EfficientModParams {
    pub c: usize,
    pub c_out: usize,
    pub r: usize,
    pub k: usize,
    pub f: ConvLayer,
    pub dw: ConvLayer,
    pub g: ConvLayer,
    pub v: ConvLayer,
    pub p: ConvLayer,
    /// `Mul` for modulation, `Sum` for the summation ablation.
    pub fuse: FuseOp,
}

impl EfficientModParams {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        c: usize,
        c_out: usize,
        r: usize,
        k: usize,
    ) -> Result<Self> {
        if c == 0 || r == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "{name}: channels and expansion must be positive (c={c}, c_out={c_out}, r={r})"
            )));
        }
        Ok(Self {
            c,
            c_out,
            r,
            k,
            f: ConvLayer::pointwise(pb, &format!("{name}.ctx.f"), c, c)?,
            dw: ConvLayer::depthwise(pb, &format!("{name}.ctx.dw"), c, k, 1)?,
            g: ConvLayer::pointwise(pb, &format!("{name}.ctx.g"), c, c)?,
            v: ConvLayer::pointwise(pb, &format!("{name}.v"), c, r * c)?,
            p: ConvLayer::pointwise(pb, &format!("{name}.p"), r * c, c_out)?,
            fuse: FuseOp::Mul,
        })
    }
}

/// Context branch output `g(gelu(dw(f(x))))`.
pub fn efficient_mod_context<B: Backend>(
    b: &mut B,
    x: &B::Value,
    p: &EfficientModParams,
) -> Result<B::Value> {
    expect_channels(b, x, p.c, "efficient_mod_block")?;
    let h = p.f.forward(b, x)?;
    let h = p.dw.forward(b, &h)?;
    let h = b.gelu(&h)?;
    p.g.forward(b, &h)
}

/// `p(ctx(x) ⊙ v(x))`, with `⊙` broadcasting the `c`-channel context over the
/// `r·c`-channel value according to `mode`.
pub fn efficient_mod_block<B: Backend>(
    b: &mut B,
    x: &B::Value,
    p: &EfficientModParams,
    mode: FusionMode,
) -> Result<B::Value> {
    let ctx = efficient_mod_context(b, x, p)?;
    let v = p.v.forward(b, x)?;
    let fused = b.fuse(&ctx, &v, mode, p.fuse)?;
    p.p.forward(b, &fused)
}
