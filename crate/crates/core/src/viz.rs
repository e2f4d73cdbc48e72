//! Binary PNM images (P5 graymap, P6 pixmap) and context-branch maps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        column: 0,
        msg: msg.into(),
    }
}

/// Splits header tokens, skipping whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<&[u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(parse_err("truncated PNM header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("invalid PNM {what}")))
    }
}

impl Image {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut h = Header { bytes, pos: 0 };
        let channels = match h.token()? {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(parse_err(format!(
                    "unsupported PNM magic '{}', expected P5 or P6",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(parse_err(format!("maxval {maxval} unsupported, expected 1..=255")));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let len = width * height * channels;
        let raster = bytes
            .get(start..start + len)
            .ok_or_else(|| parse_err(format!("raster truncated, expected {len} bytes")))?;
        let pixels = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
                .collect()
        };
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    /// `[1, 3, h, w]` tensor scaled to `[0, 1]`; gray input is replicated.
    pub fn to_tensor(&self) -> Tensor {
        let ch = self.channels;
        Tensor::from_fn([1, 3, self.height, self.width], |_, c, y, x| {
            let src = if ch == 1 { 0 } else { c };
            self.pixels[(y * self.width + x) * ch + src] as f64 / 255.0
        })
    }
}

/// Channel-mean of a context-branch output, min-max scaled to `0..=255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextMap {
    /// One-based stage.
    pub stage: usize,
    /// One-based block within the stage.
    pub block: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl ContextMap {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.values.clone(),
        }
    }
}

/// Forward-only capture of `ctx(x)` at one modulation block, addressed by
/// one-based `stage` and `block`. A constant map (including all zeros)
/// normalizes to zeros.
pub fn context_map(model: &Model, image: &Tensor, stage: usize, block: usize) -> Result<ContextMap> {
    if stage == 0 || block == 0 {
        return Err(Error::Config("stage and block are one-based".into()));
    }
    let target = model
        .stages
        .get(stage - 1)
        .and_then(|s| s.blocks.get(block - 1))
        .ok_or_else(|| Error::Config(format!("no block {block} in stage {stage}")))?;
    if target.kind() != "effmod" {
        return Err(Error::Config(format!(
            "stage {stage} block {block} is {} and has no context branch",
            target.kind()
        )));
    }
    let ctx = model.context(image, stage - 1, block - 1)?;
    let [_, c, h, w] = ctx.shape();
    let mut mean = vec![0.0; h * w];
    for ci in 0..c {
        for (m, v) in mean.iter_mut().zip(ctx.plane(0, ci)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = mean
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    Ok(ContextMap {
        stage,
        block,
        height: h,
        width: w,
        values,
    })
}
