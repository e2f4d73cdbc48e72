//! Finite-difference certification of the backward pass of every block.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backend, Eager, Tape};
use crate::blocks::{
    attention_block_with, efficient_mod_block, focal_ctx, mbconv_block, patch_embed, se_block,
    van_block, AttentionParams, ConvLayer, EfficientModParams, FocalParams, MbConvParams,
    ResidualWrap, RunCtx, SeParams, VanParams,
};
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::tensor::{FusionMode, Shape, Tensor};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Step of the fourth-order central stencil used by [`check_gradients`].
const STENCIL_STEP: f64 = 1e-3;

/// Relative error `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// A differentiable function of one input whose parameters are resolved
/// through the backend.
pub trait GradObjective {
    fn forward<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value>;
}

/// Block kinds covered by gradient certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    EfficientMod,
    Van,
    Focal,
    MbConv,
    Se,
    Attention,
    PatchEmbed,
    ResidualWrap,
}

impl BlockKind {
    pub const ALL: [BlockKind; 8] = [
        BlockKind::EfficientMod,
        BlockKind::Van,
        BlockKind::Focal,
        BlockKind::MbConv,
        BlockKind::Se,
        BlockKind::Attention,
        BlockKind::PatchEmbed,
        BlockKind::ResidualWrap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::EfficientMod => "effmod",
            BlockKind::Van => "van",
            BlockKind::Focal => "focal",
            BlockKind::MbConv => "mbconv",
            BlockKind::Se => "se",
            BlockKind::Attention => "attention",
            BlockKind::PatchEmbed => "patch_embed",
            BlockKind::ResidualWrap => "residual",
        }
    }

    /// Input shapes used when certifying this kind.
    pub fn default_shapes(self) -> Vec<Shape> {
        match self {
            BlockKind::Attention => vec![[1, 3, 1, 5], [1, 4, 3, 3], [2, 4, 2, 3]],
            BlockKind::PatchEmbed => vec![[1, 3, 8, 8], [2, 2, 7, 7], [1, 3, 9, 6]],
            BlockKind::Se => vec![[1, 4, 5, 5], [2, 6, 4, 3], [1, 8, 3, 3]],
            BlockKind::Van => vec![[1, 3, 5, 5], [1, 4, 7, 6], [2, 2, 4, 4]],
            _ => vec![[1, 4, 6, 6], [2, 3, 5, 4], [1, 6, 7, 7]],
        }
    }

    /// Builds a small instance of this block for an input of `shape`.
    pub fn instantiate(self, shape: Shape, seed: u64) -> Result<(BlockUnderTest, ParamSet)> {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut set, &mut rng);
        pb.init = Init::Uniform { scale: 0.5 };
        let c = shape[1];
        let k = if shape[2].min(shape[3]) >= 7 { 5 } else { 3 };
        let block = match self {
            BlockKind::EfficientMod => BlockUnderTest::EfficientMod(
                EfficientModParams::build(&mut pb, "block", c, c, 2, k)?,
                FusionMode::Reshape,
            ),
            BlockKind::Van => BlockUnderTest::Van(VanParams::build(&mut pb, "block", c)?),
            BlockKind::Focal => BlockUnderTest::Focal(FocalParams::build(&mut pb, "block", c, &[3, 5])?),
            BlockKind::MbConv => BlockUnderTest::MbConv(MbConvParams::build(&mut pb, "block", c, 2, k)?),
            BlockKind::Se => BlockUnderTest::Se(SeParams::build(&mut pb, "block", c, 2)?),
            BlockKind::Attention => {
                let heads = if c.is_multiple_of(2) { 2 } else { 1 };
                BlockUnderTest::Attention(
                    AttentionParams::build(&mut pb, "block", c, heads, 2 * c, Some(1e-4), 0.0, 0)?,
                    RunCtx::eval(),
                )
            }
            BlockKind::PatchEmbed => {
                BlockUnderTest::PatchEmbed(ConvLayer::patch(&mut pb, "block", c, c + 1, 3, 2, 1)?)
            }
            BlockKind::ResidualWrap => {
                let wrap = ResidualWrap::build(&mut pb, "block", c, Some(1e-4), 0.1, 0)?;
                let inner = EfficientModParams::build(&mut pb, "block.mixer", c, c, 2, k)?;
                BlockUnderTest::Residual(wrap, inner, RunCtx::eval())
            }
        };
        Ok((block, set))
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BlockKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown block kind '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// A concrete block instance with its forward mode.
#[derive(Clone, Debug)]
pub enum BlockUnderTest {
    EfficientMod(EfficientModParams, FusionMode),
    Van(VanParams),
    Focal(FocalParams),
    MbConv(MbConvParams),
    Se(SeParams),
    Attention(AttentionParams, RunCtx),
    PatchEmbed(ConvLayer),
    /// Residual wrapper around an EfficientMod mixer.
    Residual(ResidualWrap, EfficientModParams, RunCtx),
}

impl GradObjective for BlockUnderTest {
    fn forward<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        match self {
            BlockUnderTest::EfficientMod(p, mode) => efficient_mod_block(b, x, p, *mode),
            BlockUnderTest::Van(p) => van_block(b, x, p),
            BlockUnderTest::Focal(p) => focal_ctx(b, x, p),
            BlockUnderTest::MbConv(p) => mbconv_block(b, x, p),
            BlockUnderTest::Se(p) => se_block(b, x, p),
            BlockUnderTest::Attention(p, run) => attention_block_with(b, x, p, run),
            BlockUnderTest::PatchEmbed(layer) => patch_embed(b, x, layer),
            BlockUnderTest::Residual(wrap, inner, run) => wrap.forward(b, x, run, |b, h| {
                efficient_mod_block(b, h, inner, FusionMode::Reshape)
            }),
        }
    }
}

/// Comparison summary for one parameter array (or the input).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub count: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub shape: Shape,
    pub tol: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn compared(&self) -> usize {
        self.checks.iter().map(|c| c.count).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} shape {:?} tol {:e}", self.label, self.shape, self.tol)?;
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(9);
        writeln!(f, "{:<width$}  {:>12}  {:>6}  result", "parameter", "max_rel_err", "count")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>6}  {}",
                c.name,
                c.max_rel_err,
                c.count,
                if c.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn loss_eager<O: GradObjective>(obj: &O, params: &ParamSet, x: &Tensor, weights: &Tensor) -> Result<f64> {
    let mut b = Eager::new(params);
    let xv = b.constant(x.clone());
    let y = obj.forward(&mut b, &xv)?;
    let r = b.constant(weights.clone());
    let l = b.mul(&y, &r)?;
    let s = b.sum(&l)?;
    b.scale(&s, 1.0 / weights.len() as f64)?.item()
}

/// Fourth-order central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
fn stencil(mut f: impl FnMut(f64) -> Result<f64>, x0: f64) -> Result<f64> {
    let h = STENCIL_STEP;
    let p2 = f(x0 + 2.0 * h)?;
    let p1 = f(x0 + h)?;
    let m1 = f(x0 - h)?;
    let m2 = f(x0 - 2.0 * h)?;
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

fn compare(name: &str, analytic: &Tensor, numeric: &[f64], tol: f64) -> ParamCheck {
    let max_rel_err = analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    ParamCheck {
        name: name.to_string(),
        max_rel_err,
        count: numeric.len(),
        pass: max_rel_err < tol,
    }
}

/// Compares tape gradients of `L = mean(y ⊙ R)` (fixed random `R`) against
/// finite differences for every parameter and for the input.
pub fn check_gradients<O: GradObjective>(
    label: &str,
    obj: &O,
    params: &ParamSet,
    x: &Tensor,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let out_shape = {
        let mut b = Eager::new(params);
        let xv = b.constant(x.clone());
        let y = obj.forward(&mut b, &xv)?;
        b.get(&y).shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);

    let mut tape = Tape::new(params);
    let xv = tape.input(x.clone());
    let y = obj.forward(&mut tape, &xv)?;
    let r = tape.constant(weights.clone());
    let l = tape.mul(&y, &r)?;
    let s = tape.sum(&l)?;
    let root = tape.scale(&s, 1.0 / weights.len() as f64)?;
    let grads = tape.backward(root, &Tensor::scalar(1.0))?;

    let mut checks = Vec::with_capacity(params.len() + 1);
    let mut probe = params.clone();
    for (id, p) in params.iter() {
        let analytic = grads.param_or_zeros(params, id);
        let mut numeric = Vec::with_capacity(p.value.len());
        for i in 0..p.value.len() {
            let x0 = p.value.data()[i];
            let d = stencil(
                |v| {
                    probe.value_mut(id).data_mut()[i] = v;
                    loss_eager(obj, &probe, x, &weights)
                },
                x0,
            )?;
            probe.value_mut(id).data_mut()[i] = x0;
            numeric.push(d);
        }
        checks.push(compare(&p.name, &analytic, &numeric, tol));
    }

    let dx = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let d = stencil(
            |v| {
                xp.data_mut()[i] = v;
                loss_eager(obj, params, &xp, &weights)
            },
            x0,
        )?;
        xp.data_mut()[i] = x0;
        numeric.push(d);
    }
    checks.push(compare("input", &dx, &numeric, tol));

    Ok(GradCheckReport {
        label: label.to_string(),
        shape: x.shape(),
        tol,
        checks,
    })
}

/// Certifies one block kind on one input shape.
pub fn grad_check(kind: BlockKind, shape: Shape, tol: f64) -> Result<GradCheckReport> {
    grad_check_seeded(kind, shape, tol, 0)
}

pub fn grad_check_seeded(kind: BlockKind, shape: Shape, tol: f64, seed: u64) -> Result<GradCheckReport> {
    if shape.iter().product::<usize>() > 5000 {
        return Err(Error::Precondition(format!(
            "grad_check input {shape:?} is too large for a finite-difference sweep"
        )));
    }
    let (block, params) = kind.instantiate(shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    check_gradients(kind.name(), &block, &params, &x, tol, seed)
}

/// Certifies one block kind on each of its default shapes.
pub fn grad_check_shapes(kind: BlockKind, tol: f64) -> Result<Vec<GradCheckReport>> {
    kind.default_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, s)| grad_check_seeded(kind, s, tol, i as u64))
        .collect()
}
