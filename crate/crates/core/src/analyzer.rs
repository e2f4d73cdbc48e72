//! Parameter and multiply-accumulate accounting.
//!
//! One MAC (multiply-accumulate) counts as one FLOP unit. Norms, softmax,
//! activations and pooling are free.

use std::fmt;
use std::io::Write;
use std::path::Path;

use num_bigint::BigInt;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{AttentionParams, ConvLayer, EfficientModParams, Norm};
use crate::error::{precondition, Error, Result};
use crate::model::{Block, Model};
use crate::params::{ParamId, ParamSet};

/// One accounted layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    /// One-based stage, 0 for the stem and head.
    pub stage: usize,
    pub params_with_bias: u64,
    pub params_no_bias: u64,
    pub macs: u64,
}

/// Counted versus closed-form complexity of one modulation block's mixer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockDelta {
    pub name: String,
    pub c: usize,
    pub r: usize,
    pub k: usize,
    pub params_counted: u64,
    pub params_closed: u64,
    pub macs_counted: u64,
    pub macs_closed: u64,
}

impl BlockDelta {
    pub fn matches(&self) -> bool {
        self.params_counted == self.params_closed && self.macs_counted == self.macs_closed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub resolution: usize,
    pub rows: Vec<LayerRow>,
    pub block_deltas: Vec<BlockDelta>,
}

/// Parameters and MACs of one bias-free modulation block:
/// `2(r+1)C² + k²C` weights, each applied at all `H·W` positions.
pub fn closed_form_block_complexity(c: u64, r: u64, k: u64, h: u64, w: u64) -> (u64, u64) {
    let params = 2 * (r + 1) * c * c + k * k * c;
    (params, h * w * params)
}

fn strip_suffix(name: &str) -> &str {
    name.strip_suffix(".weight").unwrap_or(name)
}

struct Walker<'a> {
    params: &'a ParamSet,
    rows: Vec<LayerRow>,
    stage: usize,
}

impl Walker<'_> {
    fn len(&self, id: ParamId) -> u64 {
        self.params.value(id).len() as u64
    }

    /// Adds a conv row and returns the output extent.
    fn conv(&mut self, layer: &ConvLayer, h: usize, w: usize) -> Result<(usize, usize, u64)> {
        let (oh, ow) = (layer.spec.output_extent(h)?, layer.spec.output_extent(w)?);
        let weights = self.len(layer.weight);
        let with_bias = weights + layer.bias.map_or(0, |b| self.len(b));
        let macs = (oh * ow * layer.macs_per_position()) as u64;
        let kind = if layer.spec.kernel == 1 && layer.spec.groups == 1 {
            "pointwise"
        } else if layer.spec.groups > 1 && layer.spec.groups == layer.c_in {
            "depthwise"
        } else {
            "conv"
        };
        self.rows.push(LayerRow {
            name: strip_suffix(&self.params.get(layer.weight).name).to_string(),
            kind: kind.into(),
            stage: self.stage,
            params_with_bias: with_bias,
            params_no_bias: weights,
            macs,
        });
        Ok((oh, ow, macs))
    }

    fn affine(&mut self, name: &str, kind: &str, ids: &[ParamId]) {
        let n: u64 = ids.iter().map(|&id| self.len(id)).sum();
        self.rows.push(LayerRow {
            name: name.to_string(),
            kind: kind.into(),
            stage: self.stage,
            params_with_bias: n,
            params_no_bias: 0,
            macs: 0,
        });
    }

    fn norm(&mut self, norm: &Norm) {
        let name = self.params.get(norm.gamma).name.trim_end_matches(".gamma").to_string();
        self.affine(&name, "norm", &[norm.gamma, norm.beta]);
    }

    fn layer_scale(&mut self, id: Option<ParamId>) {
        if let Some(id) = id {
            let name = self.params.get(id).name.clone();
            self.affine(&name, "layer_scale", &[id]);
        }
    }

    fn mixer(&mut self, m: &EfficientModParams, h: usize, w: usize) -> Result<BlockDelta> {
        let mut params = 0;
        let mut macs = 0;
        for layer in [&m.f, &m.dw, &m.g, &m.v, &m.p] {
            let (_, _, mm) = self.conv(layer, h, w)?;
            params += self.len(layer.weight);
            macs += mm;
        }
        let (pc, mc) = closed_form_block_complexity(m.c as u64, m.r as u64, m.k as u64, h as u64, w as u64);
        let name = self.params.get(m.f.weight).name.trim_end_matches(".ctx.f.weight").to_string();
        Ok(BlockDelta {
            name,
            c: m.c,
            r: m.r,
            k: m.k,
            params_counted: params,
            params_closed: pc,
            macs_counted: macs,
            macs_closed: mc,
        })
    }

    fn attention(&mut self, p: &AttentionParams, h: usize, w: usize) -> Result<()> {
        let t = (h * w) as u64;
        let prefix = self.params.get(p.qkv.weight).name.trim_end_matches(".attn.qkv.weight").to_string();
        self.norm(&p.norm1);
        self.conv(&p.qkv, h, w)?;
        for part in ["qk", "av"] {
            self.rows.push(LayerRow {
                name: format!("{prefix}.attn.{part}"),
                kind: "matmul".into(),
                stage: self.stage,
                params_with_bias: 0,
                params_no_bias: 0,
                macs: t * t * p.c as u64,
            });
        }
        self.conv(&p.proj, h, w)?;
        self.layer_scale(p.layer_scale1);
        self.norm(&p.norm2);
        self.conv(&p.fc1, h, w)?;
        self.conv(&p.fc2, h, w)?;
        self.layer_scale(p.layer_scale2);
        Ok(())
    }
}

/// Full per-layer report at a square input of side `res`.
pub fn analyze(model: &Model, res: usize) -> Result<ComplexityReport> {
    let d = model.input_divisor();
    precondition!(res > 0 && res.is_multiple_of(d), "resolution {res} is not divisible by {d}");
    let mut wk = Walker {
        params: &model.params,
        rows: Vec::new(),
        stage: 0,
    };
    let mut deltas = Vec::new();
    let (mut h, mut w, _) = wk.conv(&model.stem, res, res)?;
    for (si, stage) in model.stages.iter().enumerate() {
        wk.stage = si + 1;
        if let Some(ds) = &stage.downsample {
            let (oh, ow, _) = wk.conv(ds, h, w)?;
            (h, w) = (oh, ow);
        }
        for block in &stage.blocks {
            match block {
                Block::Mod { wrap, mixer } => {
                    wk.norm(&wrap.norm);
                    deltas.push(wk.mixer(mixer, h, w)?);
                    wk.layer_scale(wrap.layer_scale);
                }
                Block::MbConv { wrap, mixer } => {
                    wk.norm(&wrap.norm);
                    for layer in [&mixer.expand, &mixer.dw, &mixer.squeeze] {
                        wk.conv(layer, h, w)?;
                    }
                    wk.layer_scale(wrap.layer_scale);
                }
                Block::Attention(p) => wk.attention(p, h, w)?,
            }
        }
    }
    wk.stage = 0;
    wk.norm(&model.head.norm);
    wk.conv(&model.head.fc, 1, 1)?;
    Ok(ComplexityReport {
        resolution: res,
        rows: wk.rows,
        block_deltas: deltas,
    })
}

/// Counted versus closed-form complexity of a standalone modulation block
/// applied to an `h × w` map.
pub fn analyze_block(params: &ParamSet, block: &EfficientModParams, h: usize, w: usize) -> Result<BlockDelta> {
    let mut wk = Walker {
        params,
        rows: Vec::new(),
        stage: 0,
    };
    wk.mixer(block, h, w)
}

/// Total MACs at a square input of side `res`.
pub fn count_macs(model: &Model, res: usize) -> Result<u64> {
    Ok(analyze(model, res)?.total_macs())
}

/// Totals for a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params_with_bias: u64,
    pub params_no_bias: u64,
    pub macs: u64,
}

impl ComplexityReport {
    pub fn totals(&self) -> Totals {
        self.rows.iter().fold(
            Totals {
                params_with_bias: 0,
                params_no_bias: 0,
                macs: 0,
            },
            |t, r| Totals {
                params_with_bias: t.params_with_bias + r.params_with_bias,
                params_no_bias: t.params_no_bias + r.params_no_bias,
                macs: t.macs + r.macs,
            },
        )
    }

    pub fn total_params(&self) -> u64 {
        self.totals().params_with_bias
    }

    pub fn total_macs(&self) -> u64 {
        self.totals().macs
    }

    /// Parameters (with biases) held by each of stages 1..=n.
    pub fn stage_params(&self) -> Vec<u64> {
        let n = self.rows.iter().map(|r| r.stage).max().unwrap_or(0);
        let mut out = vec![0; n];
        for r in self.rows.iter().filter(|r| r.stage > 0) {
            out[r.stage - 1] += r.params_with_bias;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        writeln!(
            f,
            "{:<width$}  {:<11}  {:>5}  {:>12}  {:>12}  {:>14}",
            "layer", "kind", "stage", "params", "params_nb", "macs"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:<11}  {:>5}  {:>12}  {:>12}  {:>14}",
                r.name, r.kind, r.stage, r.params_with_bias, r.params_no_bias, r.macs
            )?;
        }
        let t = self.totals();
        write!(
            f,
            "total at {res}x{res}: {:.3}M params ({:.3}M without bias/norm), {:.3}G MACs",
            t.params_with_bias as f64 / 1e6,
            t.params_no_bias as f64 / 1e6,
            t.macs as f64 / 1e9,
            res = self.resolution
        )
    }
}

/// Largest layer count accepted by [`degree_probe`].
pub const MAX_PROBE_LAYERS: usize = 12;

/// Dense integer polynomial, coefficient `i` multiplies `x₀^i`.
fn poly_square(p: &[BigInt]) -> Vec<BigInt> {
    let mut out = vec![BigInt::zero(); 2 * p.len() - 1];
    for (i, a) in p.iter().enumerate() {
        if a.is_zero() {
            continue;
        }
        for (j, b) in p.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

/// Degree in `x₀` of `x_l` for the scalar modulation chain
/// `x_{i+1} = x_i + a_i·x_i²`, expanded with exact integer coefficients.
pub fn degree_probe(layers: usize, seed: u64) -> Result<usize> {
    if layers > MAX_PROBE_LAYERS {
        return Err(Error::Precondition(format!(
            "degree probe supports at most {MAX_PROBE_LAYERS} layers, got {layers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![BigInt::zero(), BigInt::from(1)];
    for _ in 0..layers {
        let mut a: i64 = rng.random_range(-5..=4);
        if a >= 0 {
            a += 1;
        }
        let sq = poly_square(&x);
        let mut next: Vec<BigInt> = sq.into_iter().map(|c| c * a).collect();
        for (i, c) in x.iter().enumerate() {
            next[i] += c;
        }
        x = next;
    }
    let degree = x.iter().rposition(|c| !c.is_zero()).unwrap_or(0);
    Ok(degree)
}
