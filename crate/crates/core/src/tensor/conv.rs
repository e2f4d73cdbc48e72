use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{precondition, Error, Result};

/// Geometry of a 2-D convolution. Padding is zero padding, applied
/// symmetrically on every side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
            groups: 1,
            padding,
        }
    }

    /// 1×1, stride 1, no padding.
    pub fn pointwise() -> Self {
        Self::new(1, 1, 0)
    }

    /// Stride-1 convolution whose padding `d·(k−1)/2` preserves spatial extents.
    pub fn same(kernel: usize, dilation: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "\"same\" padding needs an odd kernel, got {kernel}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride: 1,
            dilation,
            groups: 1,
            padding: dilation * (kernel - 1) / 2,
        })
    }

    /// "Same"-padded depthwise convolution over `channels` channels.
    pub fn depthwise(kernel: usize, dilation: usize, channels: usize) -> Result<Self> {
        Ok(Self::same(kernel, dilation)?.with_groups(channels))
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "kernel, stride, dilation and groups must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Span of the dilated kernel, `d·(k−1)+1`.
    pub fn receptive(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output extent along one spatial axis of length `input`.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let padded = input + 2 * self.padding;
        precondition!(
            padded >= self.receptive(),
            "spatial extent {input} (padded {padded}) is smaller than the dilated kernel span {}",
            self.receptive()
        );
        Ok((padded - self.receptive()) / self.stride + 1)
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    /// Output indices `o` in `[lo, hi)` whose input tap `o·s + kk·d − p` lands
    /// inside `[0, input)`, clamped to `[0, output)`.
    #[inline]
    fn valid_range(&self, kk: usize, input: usize, output: usize) -> (usize, usize) {
        let off = kk * self.dilation;
        let s = self.stride;
        let lo = if self.padding > off {
            (self.padding - off).div_ceil(s)
        } else {
            0
        };
        let hi = if input + self.padding > off {
            ((input - 1 + self.padding - off) / s + 1).min(output)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: Shape, w: Shape, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c_in, h, wd] = x;
    let [c_out, cin_g, kh, kw] = w;
    precondition!(
        kh == spec.kernel && kw == spec.kernel,
        "weight kernel {kh}x{kw} does not match spec kernel {}",
        spec.kernel
    );
    precondition!(
        c_in % spec.groups == 0,
        "input channels {c_in} not divisible by groups {}",
        spec.groups
    );
    precondition!(
        c_out % spec.groups == 0,
        "output channels {c_out} not divisible by groups {}",
        spec.groups
    );
    precondition!(
        cin_g * spec.groups == c_in,
        "weight input-channel dimension {cin_g} x groups {} != input channels {c_in}",
        spec.groups
    );
    let oh = spec.output_extent(h)?;
    let ow = spec.output_extent(wd)?;
    Ok(Geometry {
        n,
        c_in,
        h,
        w: wd,
        c_out,
        cin_g,
        cout_g: c_out / spec.groups,
        oh,
        ow,
    })
}

/// 2-D cross-correlation of `x` (`[n, c_in, h, w]`) with `weight`
/// (`[c_out, c_in/groups, k, k]`) plus an optional bias of `c_out` elements.
///
/// Each output element accumulates the bias first, then input channels,
/// kernel rows and kernel columns in ascending order.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        precondition!(
            b.len() == g.c_out,
            "bias has {} elements, expected {}",
            b.len(),
            g.c_out
        );
    }
    let mut out = Tensor::zeros([g.n, g.c_out, g.oh, g.ow]);
    let plane = g.oh * g.ow;
    if plane == 0 || g.c_out == 0 || g.n == 0 {
        return Ok(out);
    }
    let xd = x.data();
    let wd = weight.data();
    let k = spec.kernel;
    let in_plane = g.h * g.w;

    if spec.is_plain_pointwise() {
        pointwise(xd, wd, bias.map(Tensor::data), &g, out.data_mut());
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (ni, co) = (idx / g.c_out, idx % g.c_out);
            let b0 = bias.map_or(0.0, |b| b.data()[co]);
            dst.fill(b0);
            let group = co / g.cout_g;
            let x_base = (ni * g.c_in + group * g.cin_g) * in_plane;
            let w_base = co * g.cin_g * k * k;
            for ci in 0..g.cin_g {
                let src = &xd[x_base + ci * in_plane..x_base + (ci + 1) * in_plane];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = spec.valid_range(kh, g.h, g.oh);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = spec.valid_range(kw, g.w, g.ow);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        let wv = wd[w_base + (ci * k + kh) * k + kw];
                        for oy in oh_lo..oh_hi {
                            let iy = oy * spec.stride + kh * spec.dilation - spec.padding;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if spec.stride == 1 {
                                let start = ow_lo + kw * spec.dilation - spec.padding;
                                let src_row = &row[start..start + (ow_hi - ow_lo)];
                                for (o, &v) in orow[ow_lo..ow_hi].iter_mut().zip(src_row) {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in ow_lo..ow_hi {
                                    let ix = ox * spec.stride + kw * spec.dilation - spec.padding;
                                    orow[ox] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

const CO_TILE: usize = 4;
const PX_TILE: usize = 8;

/// Output pixels per parallel task.
const PX_BLOCK: usize = 64;

/// Plain 1x1 convolution. Each task owns a block of pixels and sweeps every
/// output channel over it, so the input block stays cache-resident while
/// blocks of channels and pixels accumulate in registers. Per-element
/// summation order matches the general path: bias, then input channels
/// ascending.
fn pointwise(xd: &[f64], wd: &[f64], bias: Option<&[f64]>, g: &Geometry, out: &mut [f64]) {
    let plane = g.oh * g.ow;
    let (cin, cout) = (g.c_in, g.c_out);
    let tiles = cout.div_ceil(CO_TILE);
    let mut wt = vec![[0.0; CO_TILE]; tiles * cin];
    let mut bt = vec![[0.0; CO_TILE]; tiles];
    for co in 0..cout {
        let (t, j) = (co / CO_TILE, co % CO_TILE);
        for ci in 0..cin {
            wt[t * cin + ci][j] = wd[co * cin + ci];
        }
        bt[t][j] = bias.map_or(0.0, |b| b[co]);
    }
    let blocks = plane.div_ceil(PX_BLOCK);
    let computed: Vec<Vec<f64>> = (0..g.n * blocks)
        .into_par_iter()
        .map(|idx| {
            let (ni, blk) = (idx / blocks, idx % blocks);
            let p0 = blk * PX_BLOCK;
            let len = PX_BLOCK.min(plane - p0);
            let x = &xd[ni * cin * plane..(ni + 1) * cin * plane];
            let mut buf = vec![0.0; cout * len];
            for (t, dst) in buf.chunks_mut(CO_TILE * len).enumerate() {
                let rows = dst.len() / len;
                pointwise_tile(dst, x, &wt[t * cin..(t + 1) * cin], &bt[t], plane, p0, len, rows);
            }
            buf
        })
        .collect();
    for (idx, buf) in computed.iter().enumerate() {
        let (ni, blk) = (idx / blocks, idx % blocks);
        let p0 = blk * PX_BLOCK;
        let len = buf.len() / cout;
        for (co, src) in buf.chunks_exact(len).enumerate() {
            let at = (ni * cout + co) * plane + p0;
            out[at..at + len].copy_from_slice(src);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pointwise_tile(dst: &mut [f64], x: &[f64], wt: &[[f64; CO_TILE]], b0: &[f64; CO_TILE], plane: usize, p0: usize, len: usize, rows: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { pointwise_tile_avx(dst, x, wt, b0, plane, p0, len, rows) };
    }
    pointwise_tile_body(dst, x, wt, b0, plane, p0, len, rows)
}

/// Same loop compiled for 256-bit lanes. Separate mul and add are kept, so
/// results are bit-identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
#[allow(clippy::too_many_arguments)]
unsafe fn pointwise_tile_avx(dst: &mut [f64], x: &[f64], wt: &[[f64; CO_TILE]], b0: &[f64; CO_TILE], plane: usize, p0: usize, len: usize, rows: usize) {
    pointwise_tile_body(dst, x, wt, b0, plane, p0, len, rows)
}

/// `dst` holds `rows` output channels of `len` pixels starting at pixel `p0`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn pointwise_tile_body(dst: &mut [f64], x: &[f64], wt: &[[f64; CO_TILE]], b0: &[f64; CO_TILE], plane: usize, p0: usize, len: usize, rows: usize) {
    let mut q = 0;
    if rows == CO_TILE {
        while q + PX_TILE <= len {
            let mut acc = [[0.0; PX_TILE]; CO_TILE];
            for (a, &b) in acc.iter_mut().zip(b0) {
                *a = [b; PX_TILE];
            }
            let at = p0 + q;
            for (src, wc) in x.chunks_exact(plane).zip(wt) {
                let s: &[f64; PX_TILE] = src[at..at + PX_TILE].try_into().unwrap();
                for (a, &wv) in acc.iter_mut().zip(wc) {
                    for (o, &v) in a.iter_mut().zip(s) {
                        *o += wv * v;
                    }
                }
            }
            for (row, a) in dst.chunks_exact_mut(len).zip(&acc) {
                row[q..q + PX_TILE].copy_from_slice(a);
            }
            q += PX_TILE;
        }
    }
    for (row, &b) in dst.chunks_exact_mut(len).zip(b0) {
        row[q..].fill(b);
    }
    for (src, wc) in x.chunks_exact(plane).zip(wt) {
        let src = &src[p0 + q..p0 + len];
        for (row, &wv) in dst.chunks_exact_mut(len).zip(wc) {
            for (o, &v) in row[q..].iter_mut().zip(src) {
                *o += wv * v;
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its three inputs; entries are
/// `None` when not requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Backward pass of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = geometry(x.shape(), weight.shape(), spec)?;
    precondition!(
        dy.shape() == [g.n, g.c_out, g.oh, g.ow],
        "upstream gradient shape {:?} does not match conv output {:?}",
        dy.shape(),
        [g.n, g.c_out, g.oh, g.ow]
    );
    let (want_x, want_w, want_b) = want;
    let k = spec.kernel;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let mut grads = ConvGrads::default();

    if want_x {
        let mut dx = Tensor::zeros(x.shape());
        if in_plane > 0 {
            dx.data_mut()
                .par_chunks_mut(in_plane)
                .enumerate()
                .for_each(|(idx, dst)| {
                    let (ni, ci) = (idx / g.c_in, idx % g.c_in);
                    let group = ci / g.cin_g;
                    let cil = ci % g.cin_g;
                    for co in group * g.cout_g..(group + 1) * g.cout_g {
                        let up = &dyd[(ni * g.c_out + co) * out_plane..][..out_plane];
                        if spec.is_plain_pointwise() {
                            let wv = wd[co * g.cin_g + cil];
                            for (d, &u) in dst.iter_mut().zip(up) {
                                *d += wv * u;
                            }
                            continue;
                        }
                        for kh in 0..k {
                            let (oh_lo, oh_hi) = spec.valid_range(kh, g.h, g.oh);
                            for kw in 0..k {
                                let (ow_lo, ow_hi) = spec.valid_range(kw, g.w, g.ow);
                                let wv = wd[((co * g.cin_g + cil) * k + kh) * k + kw];
                                for oy in oh_lo..oh_hi {
                                    let iy = oy * spec.stride + kh * spec.dilation - spec.padding;
                                    let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                                    for ox in ow_lo..ow_hi {
                                        let ix =
                                            ox * spec.stride + kw * spec.dilation - spec.padding;
                                        drow[ix] += wv * urow[ox];
                                    }
                                }
                            }
                        }
                    }
                });
        }
        grads.input = Some(dx);
    }

    if want_w {
        let mut dw = Tensor::zeros(weight.shape());
        let per_out = g.cin_g * k * k;
        if per_out > 0 {
            dw.data_mut()
                .par_chunks_mut(per_out)
                .enumerate()
                .for_each(|(co, dst)| {
                    let group = co / g.cout_g;
                    for ci in 0..g.cin_g {
                        for kh in 0..k {
                            let (oh_lo, oh_hi) = spec.valid_range(kh, g.h, g.oh);
                            for kw in 0..k {
                                let (ow_lo, ow_hi) = spec.valid_range(kw, g.w, g.ow);
                                let mut acc = 0.0;
                                for ni in 0..g.n {
                                    let up = &dyd[(ni * g.c_out + co) * out_plane..][..out_plane];
                                    let src = &xd
                                        [(ni * g.c_in + group * g.cin_g + ci) * in_plane..]
                                        [..in_plane];
                                    for oy in oh_lo..oh_hi {
                                        let iy =
                                            oy * spec.stride + kh * spec.dilation - spec.padding;
                                        let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                                        let row = &src[iy * g.w..(iy + 1) * g.w];
                                        for ox in ow_lo..ow_hi {
                                            let ix = ox * spec.stride + kw * spec.dilation
                                                - spec.padding;
                                            acc += urow[ox] * row[ix];
                                        }
                                    }
                                }
                                dst[(ci * k + kh) * k + kw] = acc;
                            }
                        }
                    }
                });
        }
        grads.weight = Some(dw);
    }

    if want_b {
        let db: Vec<f64> = (0..g.c_out)
            .into_par_iter()
            .map(|co| {
                let mut acc = 0.0;
                for ni in 0..g.n {
                    acc += dyd[(ni * g.c_out + co) * out_plane..][..out_plane]
                        .iter()
                        .sum::<f64>();
                }
                acc
            })
            .collect();
        grads.bias = Some(Tensor::channel_vector(db));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_3x3_same() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::same(3, 1).unwrap()).unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn([2, 1, 4, 5], |n, _, h, w| (n * 20 + h * 5 + w) as f64 * 0.5 - 3.0);
        let w = Tensor::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let x = Tensor::zeros([1, 2, 5, 5]);
        let w = Tensor::full([3, 2, 3, 3], 0.7);
        let y = conv2d(&x, &w, None, &ConvSpec::same(3, 1).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_same_padding_rejected() {
        assert!(matches!(ConvSpec::same(4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_precondition() {
        let x = Tensor::zeros([1, 3, 5, 5]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::same(3, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Precondition(ref m) if m.contains("input channels")), "{err}");
    }

    #[test]
    fn too_small_input_is_precondition() {
        let x = Tensor::zeros([1, 1, 3, 3]);
        let w = Tensor::zeros([1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, &ConvSpec::new(5, 1, 0)).is_err());
    }

    #[test]
    fn same_padding_preserves_extent_with_dilation() {
        for (k, d) in [(3, 1), (5, 1), (7, 3), (3, 2)] {
            let spec = ConvSpec::depthwise(k, d, 2).unwrap();
            let x = Tensor::ones([1, 2, 9, 11]);
            let w = Tensor::ones([2, 1, k, k]);
            let y = conv2d(&x, &w, None, &spec).unwrap();
            assert_eq!(y.shape(), [1, 2, 9, 11]);
        }
    }

    #[test]
    fn strided_extent() {
        let spec = ConvSpec::new(7, 4, 3);
        assert_eq!(spec.output_extent(224).unwrap(), 56);
        let spec = ConvSpec::new(3, 2, 1);
        assert_eq!(spec.output_extent(56).unwrap(), 28);
    }
}
