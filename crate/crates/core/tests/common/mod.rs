//! Naive-loop reference kernels and random fixtures shared by test targets.
#![allow(dead_code)]

use effmod::autodiff::{Backend, Tape};
use effmod::blocks::{efficient_mod_block, EfficientModParams};
use effmod::params::{Init, ParamBuilder, ParamSet};
use effmod::{ConvSpec, FusionMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_CASES: usize = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max|a − b| / max(max|b|, 1e-12)`: error relative to the oracle's scale.
pub fn scaled_err(got: &Tensor, want: &Tensor) -> f64 {
    assert_eq!(got.shape(), want.shape(), "shape mismatch");
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.max_abs_diff(want) / scale
}

pub fn conv_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cin_g, k, _] = w.shape();
    let cout_g = c_out / s.groups;
    let span = s.dilation * (k - 1) + 1;
    let oh = (h + 2 * s.padding - span) / s.stride + 1;
    let ow = (wd + 2 * s.padding - span) / s.stride + 1;
    assert_eq!(cin_g * s.groups, c_in);
    Tensor::from_fn([n, c_out, oh, ow], |ni, co, oy, ox| {
        let g = co / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for kh in 0..k {
                for kw in 0..k {
                    let iy = (oy * s.stride + kh * s.dilation) as isize - s.padding as isize;
                    let ix = (ox * s.stride + kw * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += x.at(ni, g * cin_g + ci, iy as usize, ix as usize) * w.at(co, ci, kh, kw);
                }
            }
        }
        acc
    })
}

pub fn matmul_naive(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let [b0, b1, ar, ac] = a.shape();
    let [_, _, br, bc] = b.shape();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let nn = if tb { br } else { bc };
    Tensor::from_fn([b0, b1, m, nn], |i0, i1, i, j| {
        (0..k)
            .map(|p| {
                let av = if ta { a.at(i0, i1, p, i) } else { a.at(i0, i1, i, p) };
                let bv = if tb { b.at(i0, i1, j, p) } else { b.at(i0, i1, p, j) };
                av * bv
            })
            .sum()
    })
}

pub fn softmax_naive(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    Tensor::from_fn(shape, |a, b, c, d| {
        let idx = [a, b, c, d];
        let at = |j: usize| {
            let mut i = idx;
            i[axis] = j;
            x.at(i[0], i[1], i[2], i[3])
        };
        let mx = (0..shape[axis]).map(at).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..shape[axis]).map(|j| (at(j) - mx).exp()).sum();
        (at(idx[axis]) - mx).exp() / total
    })
}

pub fn layer_norm_naive(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = x.c();
    Tensor::from_fn(x.shape(), |n, ci, h, w| {
        let vals: Vec<f64> = (0..c).map(|j| x.at(n, j, h, w)).collect();
        let mean = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        (x.at(n, ci, h, w) - mean) / (var + eps).sqrt() * gamma.data()[ci] + beta.data()[ci]
    })
}

/// Random conv geometry; every fourth case is a "same"-padded depthwise
/// conv with dilation 3.
pub fn random_conv_case(rng: &mut impl Rng, i: usize) -> (Tensor, Tensor, Option<Tensor>, ConvSpec) {
    let n = rng.random_range(1..=2);
    let (c_in, c_out, spec) = if i.is_multiple_of(4) {
        let c = rng.random_range(1..=5);
        let k = [3, 5, 7][rng.random_range(0..3)];
        (c, c, ConvSpec::depthwise(k, 3, c).unwrap())
    } else {
        let groups = [1, 1, 2, 3][rng.random_range(0..4)];
        let c_in = groups * rng.random_range(1..=3);
        let c_out = groups * rng.random_range(1..=3);
        let k = [1, 2, 3, 5][rng.random_range(0..4)];
        let mut spec = ConvSpec::new(k, rng.random_range(1..=3), rng.random_range(0..=k / 2 + 1))
            .with_groups(groups);
        spec.dilation = rng.random_range(1..=3);
        (c_in, c_out, spec)
    };
    let span = spec.receptive();
    let min_side = span.saturating_sub(2 * spec.padding).max(1);
    let h = rng.random_range(min_side..=min_side + 6);
    let w = rng.random_range(min_side..=min_side + 6);
    let x = Tensor::uniform([n, c_in, h, w], -1.0, 1.0, rng);
    let wt = Tensor::uniform([c_out, c_in / spec.groups, spec.kernel, spec.kernel], -1.0, 1.0, rng);
    let b = rng.random_bool(0.5).then(|| Tensor::uniform([1, c_out, 1, 1], -1.0, 1.0, rng));
    (x, wt, b, spec)
}

/// Output and every gradient (input first, then parameters in creation
/// order) of one EfficientMod block under `L = Σ y ⊙ R`.
pub fn effmod_forward_backward(
    c: usize,
    r: usize,
    k: usize,
    shape: [usize; 4],
    seed: u64,
    mode: FusionMode,
) -> (Tensor, Vec<Tensor>) {
    let mut g = rng(seed);
    let mut params = ParamSet::new();
    let block = {
        let mut pb = ParamBuilder::new(&mut params, &mut g);
        pb.init = Init::Uniform { scale: 0.5 };
        EfficientModParams::build(&mut pb, "b", c, c, r, k).unwrap()
    };
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut g);
    let weights = Tensor::uniform(shape, -1.0, 1.0, &mut g);
    let mut tape = Tape::new(&params);
    let xv = tape.input(x);
    let y = efficient_mod_block(&mut tape, &xv, &block, mode).unwrap();
    let grads = tape.backward(y, &weights).unwrap();
    let mut out = vec![grads.get(xv).cloned().unwrap()];
    out.extend(params.ids().map(|id| grads.param_or_zeros(&params, id)));
    (tape.get(&y).clone(), out)
}

/// Worst scaled error of each kernel against its oracle over
/// [`ORACLE_CASES`] random cases: `(conv2d, matmul, softmax, layer_norm)`.
pub fn oracle_sweep(seed: u64) -> [f64; 4] {
    use effmod::tensor::{batched_matmul, conv2d, layer_norm, softmax};
    let mut g = rng(seed);
    let mut worst = [0.0f64; 4];
    for i in 0..ORACLE_CASES {
        let (x, w, b, spec) = random_conv_case(&mut g, i);
        let got = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
        worst[0] = worst[0].max(scaled_err(&got, &conv_naive(&x, &w, b.as_ref(), &spec)));

        let (b0, b1) = (g.random_range(1..=2), g.random_range(1..=3));
        let (m, k, n) = (g.random_range(1..=7), g.random_range(1..=7), g.random_range(1..=7));
        let (ta, tb) = (g.random_bool(0.5), g.random_bool(0.5));
        let a = Tensor::uniform([b0, b1, if ta { k } else { m }, if ta { m } else { k }], -1.0, 1.0, &mut g);
        let bm = Tensor::uniform([b0, b1, if tb { n } else { k }, if tb { k } else { n }], -1.0, 1.0, &mut g);
        let got = batched_matmul(&a, &bm, ta, tb).unwrap();
        worst[1] = worst[1].max(scaled_err(&got, &matmul_naive(&a, &bm, ta, tb)));

        let shape = [0; 4].map(|_| g.random_range(1..=5));
        let x = Tensor::uniform(shape, -8.0, 8.0, &mut g);
        let axis = g.random_range(0..4);
        worst[2] = worst[2].max(scaled_err(&softmax(&x, axis).unwrap(), &softmax_naive(&x, axis)));

        let shape = [g.random_range(1..=2), g.random_range(1..=8), g.random_range(1..=9), g.random_range(1..=9)];
        let x = Tensor::uniform(shape, -3.0, 3.0, &mut g);
        let gamma = Tensor::uniform([1, shape[1], 1, 1], 0.5, 1.5, &mut g);
        let beta = Tensor::uniform([1, shape[1], 1, 1], -0.5, 0.5, &mut g);
        let got = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        worst[3] = worst[3].max(scaled_err(&got, &layer_norm_naive(&x, &gamma, &beta, 1e-6)));
    }
    worst
}

/// Random EfficientMod configuration for the fusion-equivalence sweep:
/// `(c, r, k, shape, seed)`.
pub fn random_fusion_case(g: &mut impl Rng) -> (usize, usize, usize, [usize; 4], u64) {
    let c = g.random_range(1..=8);
    let r = g.random_range(1..=6);
    let k = [1, 3, 5, 7][g.random_range(0..4)];
    let shape = [g.random_range(1..=2), c, g.random_range(1..=7), g.random_range(1..=7)];
    (c, r, k, shape, g.random())
}
