//! Declarative architecture specs, the shipped presets, and runnable models.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::blocks::{
    attention_block_with, efficient_mod_block, efficient_mod_context, mbconv_block, AttentionParams,
    ConvLayer, EfficientModParams, MbConvParams, Norm, ResidualWrap, RunCtx,
};
use crate::error::{precondition, Error, Result};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::tensor::{FuseOp, FusionMode, Shape, Tensor};

/// Resolution divisor contributed by the stem and each downsample, in order.
pub const STAGE_DIVISORS: [usize; 4] = [4, 2, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStep {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStep {
    /// Half-kernel zero padding, which makes the output extent exactly
    /// `input / stride` for inputs divisible by the stride.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

fn default_downsample() -> ConvStep {
    ConvStep { kernel: 3, stride: 2 }
}

fn default_dw_kernel() -> usize {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dim: usize,
    pub mod_blocks: usize,
    pub attn_blocks: usize,
    /// Expansion ratios cycled across the stage's modulation blocks,
    /// starting from the first entry at block 0.
    pub expansion_pattern: Vec<usize>,
    #[serde(default = "default_dw_kernel")]
    pub dw_kernel: usize,
}

impl StageSpec {
    pub fn expansion(&self, block: usize) -> usize {
        self.expansion_pattern[block % self.expansion_pattern.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub heads: usize,
    /// MLP hidden width is `round(mlp_ratio · dim)`.
    pub mlp_ratio: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            heads: AttentionParams::DEFAULT_HEADS,
            mlp_ratio: 4.0,
        }
    }
}

impl AttentionSpec {
    pub fn hidden(&self, dim: usize) -> usize {
        (self.mlp_ratio * dim as f64).round() as usize
    }
}

/// Hierarchical four-stage architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub stem: ConvStep,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_downsample")]
    pub downsample: ConvStep,
    pub head: HeadSpec,
    pub drop_path_rate: f64,
    pub layer_scale_init: f64,
    #[serde(default)]
    pub attention: AttentionSpec,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Checks every structural invariant, naming the offending stage.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 4 {
            return cfg(format!("expected exactly 4 stages, got {}", self.stages.len()));
        }
        if self.stem.stride != STAGE_DIVISORS[0] || self.stem.kernel < self.stem.stride {
            return cfg(format!(
                "stem must downsize by {} with kernel >= stride, got kernel {} stride {}",
                STAGE_DIVISORS[0], self.stem.kernel, self.stem.stride
            ));
        }
        if self.downsample.stride != STAGE_DIVISORS[1] || self.downsample.kernel < self.downsample.stride {
            return cfg(format!(
                "downsample must downsize by {} with kernel >= stride, got kernel {} stride {}",
                STAGE_DIVISORS[1], self.downsample.kernel, self.downsample.stride
            ));
        }
        if self.head.classes == 0 {
            return cfg("head needs at least one class".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return cfg(format!("drop_path_rate {} must lie in [0, 1)", self.drop_path_rate));
        }
        if !(self.layer_scale_init.is_finite() && self.layer_scale_init >= 0.0) {
            return cfg(format!("layer_scale_init {} must be finite and >= 0", self.layer_scale_init));
        }
        if self.attention.heads == 0 || self.attention.mlp_ratio.is_nan() || self.attention.mlp_ratio <= 0.0 {
            return cfg("attention heads and mlp_ratio must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let name = i + 1;
            if s.dim == 0 {
                return cfg(format!("stage {name}: dim must be positive"));
            }
            if s.mod_blocks + s.attn_blocks == 0 {
                return cfg(format!("stage {name}: needs at least one block"));
            }
            if s.mod_blocks > 0 && (s.expansion_pattern.is_empty() || s.expansion_pattern.contains(&0)) {
                return cfg(format!("stage {name}: expansion_pattern must be non-empty and positive"));
            }
            if s.dw_kernel % 2 == 0 {
                return cfg(format!("stage {name}: dw_kernel {} must be odd", s.dw_kernel));
            }
            if s.attn_blocks > 0 && i < 2 {
                return cfg(format!("stage {name}: attention blocks are only allowed in stages 3 and 4"));
            }
            if s.attn_blocks > 0 && s.dim % self.attention.heads != 0 {
                return cfg(format!(
                    "stage {name}: dim {} is not divisible by {} heads",
                    s.dim, self.attention.heads
                ));
            }
        }
        Ok(())
    }
}

/// Named hierarchical presets.
pub const PRESETS: [&str; 5] = ["xxs", "xs", "s", "s_conv", "micro"];

/// Attention MLP ratios chosen so hybrid presets land on their parameter
/// budgets. See the README for the resulting counts.
pub const MLP_RATIO_XXS: f64 = 4.0;
pub const MLP_RATIO_XS: f64 = 4.75;
pub const MLP_RATIO_S: f64 = 1.4;

fn stage(dim: usize, mod_blocks: usize, attn_blocks: usize, pattern: &[usize]) -> StageSpec {
    StageSpec {
        dim,
        mod_blocks,
        attn_blocks,
        expansion_pattern: pattern.to_vec(),
        dw_kernel: 7,
    }
}

fn hierarchical(dims: [usize; 4], blocks: [[usize; 2]; 4], pattern: &[usize], drop_path: f64, mlp_ratio: f64) -> ModelSpec {
    ModelSpec {
        stem: ConvStep { kernel: 7, stride: 4 },
        stages: (0..4)
            .map(|i| stage(dims[i], blocks[i][0], blocks[i][1], pattern))
            .collect(),
        downsample: default_downsample(),
        head: HeadSpec { classes: 1000 },
        drop_path_rate: drop_path,
        layer_scale_init: 1e-4,
        attention: AttentionSpec {
            heads: AttentionParams::DEFAULT_HEADS,
            mlp_ratio,
        },
    }
}

/// Returns one of [`PRESETS`].
pub fn build_preset(name: &str) -> Result<ModelSpec> {
    Ok(match name {
        "xxs" => hierarchical([32, 64, 128, 256], [[2, 0], [2, 0], [6, 1], [2, 2]], &[1, 6], 0.0, MLP_RATIO_XXS),
        "xs" => hierarchical([32, 64, 144, 288], [[3, 0], [3, 0], [4, 3], [2, 3]], &[1, 4], 0.0, MLP_RATIO_XS),
        "s" => hierarchical([32, 64, 144, 312], [[4, 0], [4, 0], [8, 4], [8, 4]], &[1, 6], 0.02, MLP_RATIO_S),
        "s_conv" => hierarchical([40, 80, 160, 344], [[4, 0], [4, 0], [12, 0], [8, 0]], &[1, 6], 0.0, 4.0),
        "micro" => {
            let mut spec = hierarchical([8, 16, 24, 32], [[1, 0]; 4], &[4], 0.0, 4.0);
            spec.head.classes = 4;
            spec
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown preset '{name}', expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoBlock {
    EfficientMod,
    MbConv,
}

/// Constant-width, constant-resolution stack after one large patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotropicSpec {
    pub block: IsoBlock,
    pub dim: usize,
    pub depth: usize,
    pub r: usize,
    pub kernel: usize,
    pub patch: usize,
    pub classes: usize,
    pub layer_scale_init: f64,
}

impl IsotropicSpec {
    pub fn efficient_mod(dim: usize, depth: usize) -> Self {
        Self {
            block: IsoBlock::EfficientMod,
            dim,
            depth,
            r: 6,
            kernel: 7,
            patch: 14,
            classes: 1000,
            layer_scale_init: 1e-4,
        }
    }

    pub fn mbconv(dim: usize, depth: usize) -> Self {
        Self {
            block: IsoBlock::MbConv,
            r: 7,
            kernel: 3,
            ..Self::efficient_mod(dim, depth)
        }
    }
}

/// Isotropic comparison pairs `(name, EfficientMod spec, MBConv spec)`.
pub fn isotropic_pairs() -> Vec<(&'static str, IsotropicSpec, IsotropicSpec)> {
    vec![
        ("iso_256x13", IsotropicSpec::efficient_mod(256, 13), IsotropicSpec::mbconv(256, 13)),
        ("iso_196x11", IsotropicSpec::efficient_mod(196, 11), IsotropicSpec::mbconv(196, 11)),
    ]
}

/// Looks up `iso_<dim>x<depth>_{mod,mbconv}`.
pub fn isotropic_preset(name: &str) -> Result<IsotropicSpec> {
    for (pair, m, b) in isotropic_pairs() {
        if name == format!("{pair}_mod") {
            return Ok(m);
        }
        if name == format!("{pair}_mbconv") {
            return Ok(b);
        }
    }
    Err(Error::Config(format!("unknown isotropic preset '{name}'")))
}

pub fn isotropic_preset_names() -> Vec<String> {
    isotropic_pairs()
        .iter()
        .flat_map(|(p, _, _)| [format!("{p}_mod"), format!("{p}_mbconv")])
        .collect()
}

/// Construction knobs that are not part of the architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub seed: u64,
    pub init: Init,
    pub bias: bool,
    pub fuse_op: FuseOp,
}

impl BuildOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            init: Init::default(),
            bias: true,
            fuse_op: FuseOp::Mul,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Mod { wrap: ResidualWrap, mixer: EfficientModParams },
    MbConv { wrap: ResidualWrap, mixer: MbConvParams },
    Attention(AttentionParams),
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Mod { .. } => "effmod",
            Block::MbConv { .. } => "mbconv",
            Block::Attention(_) => "attention",
        }
    }

    fn forward<B: Backend>(&self, b: &mut B, x: &B::Value, run: &RunCtx, mode: FusionMode) -> Result<B::Value> {
        match self {
            Block::Mod { wrap, mixer } => wrap.forward(b, x, run, |b, h| efficient_mod_block(b, h, mixer, mode)),
            Block::MbConv { wrap, mixer } => wrap.forward(b, x, run, |b, h| mbconv_block(b, h, mixer)),
            Block::Attention(p) => attention_block_with(b, x, p, run),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub dim: usize,
    pub downsample: Option<ConvLayer>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub norm: Norm,
    pub fc: ConvLayer,
}

/// Architecture family a model was built from.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Hierarchical(ModelSpec),
    Isotropic(IsotropicSpec),
}

/// A built network: parameters plus the structure that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub params: ParamSet,
    pub stem: ConvLayer,
    pub stages: Vec<Stage>,
    pub head: Head,
    pub fusion: FusionMode,
    pub in_channels: usize,
}

/// Logits plus the feature shape after every stage.
#[derive(Clone, Debug)]
pub struct ForwardTrace<V> {
    pub logits: V,
    pub stage_shapes: Vec<Shape>,
}

type Rng = ChaCha8Rng;

fn head<R: rand::Rng>(pb: &mut ParamBuilder<R>, dim: usize, classes: usize) -> Result<Head> {
    Ok(Head {
        norm: Norm::build(pb, "head.norm", dim),
        fc: ConvLayer::pointwise(pb, "head.fc", dim, classes)?,
    })
}

/// Materializes every parameter of a hierarchical spec.
pub fn build_model(spec: &ModelSpec, opts: &BuildOptions) -> Result<Model> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut rng = Rng::seed_from_u64(opts.seed);
    let mut pb = ParamBuilder::new(&mut params, &mut rng);
    pb.init = opts.init;
    pb.bias = opts.bias;
    let in_channels = 3;
    let stem = ConvLayer::patch(
        &mut pb,
        "stem",
        in_channels,
        spec.stages[0].dim,
        spec.stem.kernel,
        spec.stem.stride,
        spec.stem.padding(),
    )?;
    let mut stages = Vec::with_capacity(4);
    let mut layer = 0;
    let ls = Some(spec.layer_scale_init);
    for (si, s) in spec.stages.iter().enumerate() {
        let downsample = if si == 0 {
            None
        } else {
            Some(ConvLayer::patch(
                &mut pb,
                &format!("stages.{si}.downsample"),
                spec.stages[si - 1].dim,
                s.dim,
                spec.downsample.kernel,
                spec.downsample.stride,
                spec.downsample.padding(),
            )?)
        };
        let mut blocks = Vec::with_capacity(s.mod_blocks + s.attn_blocks);
        for bi in 0..s.mod_blocks {
            let name = format!("stages.{si}.blocks.{bi}");
            let wrap = ResidualWrap::build(&mut pb, &name, s.dim, ls, spec.drop_path_rate, layer)?;
            let mut mixer =
                EfficientModParams::build(&mut pb, &format!("{name}.mixer"), s.dim, s.dim, s.expansion(bi), s.dw_kernel)?;
            mixer.fuse = opts.fuse_op;
            blocks.push(Block::Mod { wrap, mixer });
            layer += 1;
        }
        for ai in 0..s.attn_blocks {
            let name = format!("stages.{si}.blocks.{}", s.mod_blocks + ai);
            blocks.push(Block::Attention(AttentionParams::build(
                &mut pb,
                &name,
                s.dim,
                spec.attention.heads,
                spec.attention.hidden(s.dim),
                ls,
                spec.drop_path_rate,
                layer,
            )?));
            layer += 1;
        }
        stages.push(Stage {
            dim: s.dim,
            downsample,
            blocks,
        });
    }
    let head = head(&mut pb, spec.stages[3].dim, spec.head.classes)?;
    Ok(Model {
        arch: Arch::Hierarchical(spec.clone()),
        params,
        stem,
        stages,
        head,
        fusion: FusionMode::Reshape,
        in_channels,
    })
}

/// Patchify, `depth` residual blocks at fixed width, then the head.
pub fn build_isotropic(spec: &IsotropicSpec, opts: &BuildOptions) -> Result<Model> {
    if spec.dim == 0 || spec.depth == 0 || spec.r == 0 || spec.patch == 0 || spec.classes == 0 {
        return Err(Error::Config(format!("isotropic spec has a zero extent: {spec:?}")));
    }
    let mut params = ParamSet::new();
    let mut rng = Rng::seed_from_u64(opts.seed);
    let mut pb = ParamBuilder::new(&mut params, &mut rng);
    pb.init = opts.init;
    pb.bias = opts.bias;
    let in_channels = 3;
    let stem = ConvLayer::patch(&mut pb, "stem", in_channels, spec.dim, spec.patch, spec.patch, 0)?;
    let ls = Some(spec.layer_scale_init);
    let mut blocks = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let name = format!("blocks.{i}");
        let wrap = ResidualWrap::build(&mut pb, &name, spec.dim, ls, 0.0, i)?;
        let mixer = format!("{name}.mixer");
        blocks.push(match spec.block {
            IsoBlock::EfficientMod => {
                let mut mixer = EfficientModParams::build(&mut pb, &mixer, spec.dim, spec.dim, spec.r, spec.kernel)?;
                mixer.fuse = opts.fuse_op;
                Block::Mod { wrap, mixer }
            }
            IsoBlock::MbConv => Block::MbConv {
                wrap,
                mixer: MbConvParams::build(&mut pb, &mixer, spec.dim, spec.r, spec.kernel)?,
            },
        });
    }
    let head = head(&mut pb, spec.dim, spec.classes)?;
    Ok(Model {
        arch: Arch::Isotropic(*spec),
        params,
        stem,
        stages: vec![Stage {
            dim: spec.dim,
            downsample: None,
            blocks,
        }],
        head,
        fusion: FusionMode::Reshape,
        in_channels,
    })
}

impl Model {
    /// Builds a hierarchical preset or an isotropic preset by name.
    pub fn from_preset(name: &str, opts: &BuildOptions) -> Result<Self> {
        match build_preset(name) {
            Ok(spec) => build_model(&spec, opts),
            Err(e) => match isotropic_preset(name) {
                Ok(iso) => build_isotropic(&iso, opts),
                Err(_) => Err(e),
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.head.fc.c_out
    }

    /// Input extents must be a multiple of this.
    pub fn input_divisor(&self) -> usize {
        match &self.arch {
            Arch::Hierarchical(_) => STAGE_DIVISORS.iter().product(),
            Arch::Isotropic(s) => s.patch,
        }
    }

    /// Replaces the fusion operation of every modulation block.
    pub fn set_fuse_op(&mut self, op: FuseOp) {
        for s in &mut self.stages {
            for b in &mut s.blocks {
                if let Block::Mod { mixer, .. } = b {
                    mixer.fuse = op;
                }
            }
        }
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let d = self.input_divisor();
        precondition!(
            shape[1] == self.in_channels,
            "model expects {} input channels, got {}",
            self.in_channels,
            shape[1]
        );
        precondition!(
            shape[2] > 0 && shape[3] > 0 && shape[2].is_multiple_of(d) && shape[3].is_multiple_of(d),
            "input resolution {}x{} is not divisible by {d}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    fn run_stage<B: Backend>(&self, b: &mut B, si: usize, x: B::Value, run: &RunCtx) -> Result<B::Value> {
        let stage = &self.stages[si];
        let mut x = match &stage.downsample {
            Some(ds) => ds.forward(b, &x)?,
            None => x,
        };
        for block in &stage.blocks {
            x = block.forward(b, &x, run, self.fusion)?;
        }
        Ok(x)
    }

    /// Forward pass recording the feature shape after each stage.
    pub fn forward_trace<B: Backend>(&self, b: &mut B, x: &B::Value, run: &RunCtx) -> Result<ForwardTrace<B::Value>> {
        self.check_input(b.get(x).shape())?;
        let mut h = self.stem.forward(b, x)?;
        let mut stage_shapes = Vec::with_capacity(self.stages.len());
        for si in 0..self.stages.len() {
            h = self.run_stage(b, si, h, run)?;
            stage_shapes.push(b.get(&h).shape());
        }
        let pooled = b.global_avg_pool(&h)?;
        let pooled = self.head.norm.forward(b, &pooled)?;
        let logits = self.head.fc.forward(b, &pooled)?;
        Ok(ForwardTrace { logits, stage_shapes })
    }

    /// Logits `[n, classes, 1, 1]`.
    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::Value, run: &RunCtx) -> Result<B::Value> {
        Ok(self.forward_trace(b, x, run)?.logits)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut b = Eager::new(&self.params);
        let xv = b.input(x);
        let y = self.forward(&mut b, &xv, &RunCtx::eval())?;
        Ok(y.into_owned())
    }

    /// Eval-mode logits and per-stage feature shapes.
    pub fn trace(&self, x: &Tensor) -> Result<(Tensor, Vec<Shape>)> {
        let mut b = Eager::new(&self.params);
        let xv = b.input(x);
        let t = self.forward_trace(&mut b, &xv, &RunCtx::eval())?;
        Ok((t.logits.into_owned(), t.stage_shapes))
    }

    /// Context-branch output of modulation block `block` in stage `stage`
    /// (both zero-based), evaluated on the block's normalized input.
    pub fn context(&self, x: &Tensor, stage: usize, block: usize) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let target = self
            .stages
            .get(stage)
            .and_then(|s| s.blocks.get(block))
            .ok_or_else(|| Error::Config(format!("no block {block} in stage {stage} (zero-based)")))?;
        let (wrap, mixer) = match target {
            Block::Mod { wrap, mixer } => (wrap, mixer),
            other => {
                return Err(Error::Config(format!(
                    "stage {stage} block {block} (zero-based) is {} and has no context branch",
                    other.kind()
                )))
            }
        };
        let run = RunCtx::eval();
        let mut b = Eager::new(&self.params);
        let xv = b.input(x);
        let mut h = self.stem.forward(&mut b, &xv)?;
        for si in 0..stage {
            h = self.run_stage(&mut b, si, h, &run)?;
        }
        let s = &self.stages[stage];
        if let Some(ds) = &s.downsample {
            h = ds.forward(&mut b, &h)?;
        }
        for blk in &s.blocks[..block] {
            h = blk.forward(&mut b, &h, &run, self.fusion)?;
        }
        let normed = wrap.norm.forward(&mut b, &h)?;
        Ok(efficient_mod_context(&mut b, &normed, mixer)?.into_owned())
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            let kinds: Vec<_> = s.blocks.iter().map(|b| b.kind()).collect();
            writeln!(f, "stage {}: dim {} blocks [{}]", i + 1, s.dim, kinds.join(", "))?;
        }
        write!(f, "head: {} classes, {} parameters", self.classes(), self.params.total_len())
    }
}
