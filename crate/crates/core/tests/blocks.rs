mod common;

use std::borrow::Cow;

use common::rng;
use effmod::autodiff::Eager;
use effmod::blocks::*;
use effmod::params::{Init, ParamBuilder, ParamSet};
use effmod::tensor::{conv2d, fuse_modulate, gelu, layer_norm, mul_broadcast, sigmoid, slice_channels};
use effmod::{Error, FusionMode, Result, Tensor};
use rand_chacha::ChaCha8Rng;

type Pb<'a> = ParamBuilder<'a, ChaCha8Rng>;

fn make<T>(seed: u64, bias: bool, f: impl FnOnce(&mut Pb) -> Result<T>) -> (T, ParamSet) {
    let mut params = ParamSet::new();
    let mut g = rng(seed);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    pb.bias = bias;
    pb.init = Init::Uniform { scale: 0.5 };
    let t = f(&mut pb).unwrap();
    (t, params)
}

fn run<'a>(
    params: &'a ParamSet,
    x: &'a Tensor,
    f: impl FnOnce(&mut Eager<'a>, &Cow<'a, Tensor>) -> Result<Cow<'a, Tensor>>,
) -> Result<Tensor> {
    let mut b = Eager::new(params);
    let xv = b.input(x);
    f(&mut b, &xv).map(Cow::into_owned)
}

/// Reference application of a conv layer through the raw kernel.
fn apply(l: &ConvLayer, params: &ParamSet, x: &Tensor) -> Tensor {
    let bias = l.bias.map(|id| params.value(id));
    conv2d(x, params.value(l.weight), bias, &l.spec).unwrap()
}

fn input(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max |diff| {d:e} > {tol:e}");
}

fn is_zero(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0)
}

#[test]
fn effmod_zero_input_no_bias_gives_zeros() {
    let (p, params) = make(1, false, |pb| EfficientModParams::build(pb, "m", 8, 8, 3, 5));
    let x = Tensor::zeros([1, 8, 6, 6]);
    assert!(is_zero(&run(&params, &x, |b, x| efficient_mod_block(b, x, &p, FusionMode::Reshape)).unwrap()));
}

#[test]
fn effmod_shape_contract() {
    let (p, params) = make(2, true, |pb| EfficientModParams::build(pb, "m", 64, 64, 6, 7));
    let x = input([1, 64, 14, 14], 3);
    let y = run(&params, &x, |b, x| efficient_mod_block(b, x, &p, FusionMode::Repeat)).unwrap();
    assert_eq!(y.shape(), [1, 64, 14, 14]);
}

#[test]
fn effmod_equals_unfused_composition() {
    let (p, params) = make(4, true, |pb| EfficientModParams::build(pb, "m", 6, 5, 3, 3));
    let x = input([2, 6, 5, 7], 5);
    let ctx = apply(&p.g, &params, &gelu(&apply(&p.dw, &params, &apply(&p.f, &params, &x))));
    let v = apply(&p.v, &params, &x);
    let want = apply(&p.p, &params, &fuse_modulate(&ctx, &v, FusionMode::Repeat).unwrap());
    for mode in [FusionMode::Repeat, FusionMode::Reshape] {
        let got = run(&params, &x, |b, x| efficient_mod_block(b, x, &p, mode)).unwrap();
        assert_eq!(got.shape(), [2, 5, 5, 7]);
        assert!(got.bit_eq(&want), "{mode:?}");
    }
}

#[test]
fn effmod_identity_projections_reduce_to_gelu_times_x() {
    let c = 4;
    let (p, mut params) = make(6, false, |pb| EfficientModParams::build(pb, "m", c, c, 1, 1));
    let eye = Tensor::from_fn([c, c, 1, 1], |o, i, _, _| f64::from(o == i));
    for l in [&p.f, &p.g, &p.v, &p.p] {
        *params.value_mut(l.weight) = eye.clone();
    }
    *params.value_mut(p.dw.weight) = Tensor::ones([c, 1, 1, 1]);
    let x = input([1, c, 3, 3], 7);
    let y = run(&params, &x, |b, x| efficient_mod_block(b, x, &p, FusionMode::Reshape)).unwrap();
    let want = Tensor::new(x.shape(), gelu(&x).data().iter().zip(x.data()).map(|(g, v)| g * v).collect()).unwrap();
    assert_close(&y, &want, 1e-15);
}

#[test]
fn effmod_rejects_channel_mismatch() {
    let (p, params) = make(8, true, |pb| EfficientModParams::build(pb, "m", 4, 4, 2, 3));
    let x = Tensor::zeros([1, 3, 4, 4]);
    let err = run(&params, &x, |b, x| efficient_mod_block(b, x, &p, FusionMode::Reshape)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[test]
fn van_zero_input_and_shape() {
    let (p, params) = make(9, false, |pb| VanParams::build(pb, "van", 8));
    let zero = Tensor::zeros([1, 8, 9, 9]);
    assert!(is_zero(&run(&params, &zero, |b, x| van_block(b, x, &p)).unwrap()));
    let (p, params) = make(9, true, |pb| VanParams::build(pb, "van", 8));
    let x = input([1, 8, 9, 9], 10);
    assert_eq!(run(&params, &x, |b, x| van_block(b, x, &p)).unwrap().shape(), [1, 8, 9, 9]);
}

#[test]
fn van_context_impulse_support_radius_is_eleven() {
    let (p, params) = make(11, false, |pb| VanParams::build(pb, "van", 2));
    let (side, mid) = (27, 13);
    let x = Tensor::from_fn([1, 2, side, side], |_, c, y, x| if (y, x) == (mid, mid) { 1.0 + c as f64 } else { 0.0 });
    let ctx = run(&params, &x, |b, x| van_context(b, x, &p)).unwrap();
    let mut radius = 0;
    for c in 0..2 {
        for y in 0..side {
            for x in 0..side {
                if ctx.at(0, c, y, x) != 0.0 {
                    radius = radius.max(y.abs_diff(mid).max(x.abs_diff(mid)));
                }
            }
        }
    }
    assert_eq!(radius, (5 - 1) / 2 + 3 * (7 - 1) / 2);
}

/// `g(Σ_l gelu(dw_l(f x)) ⊙ z_l(f x))` built from raw kernels.
fn focal_reference(p: &FocalParams, params: &ParamSet, x: &Tensor) -> Tensor {
    let fx = apply(&p.f, params, x);
    let z = apply(&p.z, params, &fx);
    let mut acc = Tensor::zeros(fx.shape());
    for (l, dw) in p.levels.iter().enumerate() {
        let term = mul_broadcast(&gelu(&apply(dw, params, &fx)), &slice_channels(&z, l, 1).unwrap()).unwrap();
        acc.add_assign(&term).unwrap();
    }
    apply(&p.g, params, &acc)
}

#[test]
fn focal_single_and_two_level_compositions() {
    for kernels in [vec![3], vec![3, 5]] {
        let (p, params) = make(12, true, |pb| FocalParams::build(pb, "focal", 6, &kernels));
        assert_eq!(p.levels.len(), kernels.len());
        let x = input([2, 6, 7, 6], 13);
        let got = run(&params, &x, |b, x| focal_ctx(b, x, &p)).unwrap();
        assert_close(&got, &focal_reference(&p, &params, &x), 1e-12);
    }
}

#[test]
fn focal_zero_input_and_invalid_levels() {
    let (p, params) = make(14, false, |pb| FocalParams::build(pb, "focal", 4, &[3, 5]));
    let zero = Tensor::zeros([1, 4, 6, 6]);
    assert!(is_zero(&run(&params, &zero, |b, x| focal_ctx(b, x, &p)).unwrap()));
    let mut params = ParamSet::new();
    let mut g = rng(0);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    assert!(matches!(FocalParams::build(&mut pb, "f", 4, &[]), Err(Error::Config(_))));
    assert!(matches!(FocalParams::build(&mut pb, "f", 4, &[5, 3]), Err(Error::Config(_))));
}

#[test]
fn mbconv_parameter_count_and_composition() {
    let (_, params) = make(15, false, |pb| MbConvParams::build(pb, "mb", 64, 6, 3));
    assert_eq!(params.total_len(), 52_608);

    let (p, params) = make(16, true, |pb| MbConvParams::build(pb, "mb", 4, 3, 5));
    let x = input([1, 4, 6, 6], 17);
    let want = apply(&p.squeeze, &params, &gelu(&apply(&p.dw, &params, &apply(&p.expand, &params, &x))));
    assert!(run(&params, &x, |b, x| mbconv_block(b, x, &p)).unwrap().bit_eq(&want));

    let (p, params) = make(18, false, |pb| MbConvParams::build(pb, "mb", 4, 2, 3));
    let zero = Tensor::zeros([1, 4, 5, 5]);
    assert!(is_zero(&run(&params, &zero, |b, x| mbconv_block(b, x, &p)).unwrap()));
}

#[test]
fn se_closed_gate_halves_input() {
    let (p, mut params) = make(19, false, |pb| SeParams::build(pb, "se", 8, SeParams::DEFAULT_REDUCTION));
    *params.value_mut(p.w2.weight) = Tensor::zeros([8, 2, 1, 1]);
    let x = input([2, 8, 3, 4], 20);
    assert!(run(&params, &x, |b, x| se_block(b, x, &p)).unwrap().bit_eq(&x.scale(0.5)));
}

#[test]
fn se_saturated_gate_passes_input() {
    let (p, mut params) = make(21, true, |pb| SeParams::build(pb, "se", 8, 4));
    *params.value_mut(p.w2.weight) = Tensor::zeros([8, 2, 1, 1]);
    *params.value_mut(p.w2.bias.unwrap()) = Tensor::full([1, 8, 1, 1], 50.0);
    let x = input([1, 8, 3, 3], 22);
    assert_close(&run(&params, &x, |b, x| se_block(b, x, &p)).unwrap(), &x, 1e-20);
}

#[test]
fn se_composition_and_reduction_check() {
    let (p, params) = make(23, true, |pb| SeParams::build(pb, "se", 6, 3));
    let x = input([2, 6, 4, 3], 24);
    let s = effmod::tensor::global_avg_pool(&x).unwrap();
    let gate = sigmoid(&apply(&p.w2, &params, &gelu(&apply(&p.w1, &params, &s))));
    let want = mul_broadcast(&x, &gate).unwrap();
    assert!(run(&params, &x, |b, x| se_block(b, x, &p)).unwrap().bit_eq(&want));
    let mut params = ParamSet::new();
    let mut g = rng(0);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    assert!(matches!(SeParams::build(&mut pb, "se", 6, 4), Err(Error::Config(_))));
}

fn attention(seed: u64, c: usize, heads: usize, bias: bool) -> (AttentionParams, ParamSet) {
    make(seed, bias, |pb| AttentionParams::build(pb, "attn", c, heads, 2 * c, None, 0.0, 0))
}

#[test]
fn attention_single_token_skips_mixing() {
    let c = 4;
    let (p, params) = attention(25, c, 2, true);
    let x = input([1, c, 1, 1], 26);
    let ln = |n: &Norm, t: &Tensor| layer_norm(t, params.value(n.gamma), params.value(n.beta), n.eps).unwrap();
    // one token: attention weights are exactly 1, so the branch is proj(v)
    let v = slice_channels(&apply(&p.qkv, &params, &ln(&p.norm1, &x)), 2 * c, c).unwrap();
    let mut x1 = x.clone();
    x1.add_assign(&apply(&p.proj, &params, &v)).unwrap();
    let mut want = x1.clone();
    want.add_assign(&apply(&p.fc2, &params, &gelu(&apply(&p.fc1, &params, &ln(&p.norm2, &x1))))).unwrap();
    assert_close(&run(&params, &x, |b, x| attention_block(b, x, &p)).unwrap(), &want, 1e-14);
}

#[test]
fn attention_is_permutation_equivariant() {
    let (c, t) = (8, 7);
    let (p, params) = attention(27, c, 2, true);
    let x = input([2, c, 1, t], 28);
    let perm = [3, 0, 6, 2, 5, 1, 4];
    let permute = |z: &Tensor| Tensor::from_fn(z.shape(), |n, ch, _, i| z.at(n, ch, 0, perm[i]));
    let y = run(&params, &x, |b, x| attention_block(b, x, &p)).unwrap();
    let xp = permute(&x);
    let yp = run(&params, &xp, |b, x| attention_block(b, x, &p)).unwrap();
    assert_close(&yp, &permute(&y), 1e-13);
}

#[test]
fn attention_zero_input_zero_gamma_gives_zeros() {
    let (p, mut params) = attention(29, 4, 2, false);
    for n in [&p.norm1, &p.norm2] {
        *params.value_mut(n.gamma) = Tensor::zeros([1, 4, 1, 1]);
        *params.value_mut(n.beta) = Tensor::zeros([1, 4, 1, 1]);
    }
    let x = Tensor::zeros([1, 4, 2, 3]);
    assert!(is_zero(&run(&params, &x, |b, x| attention_block(b, x, &p)).unwrap()));
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut params = ParamSet::new();
    let mut g = rng(0);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    let err = AttentionParams::build(&mut pb, "a", 6, 4, 12, None, 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(AttentionParams::DEFAULT_HEADS, 8);
}

fn residual_setup(ls: Option<f64>, dp: f64) -> (ResidualWrap, EfficientModParams, ParamSet) {
    let mut params = ParamSet::new();
    let mut g = rng(30);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    pb.init = Init::Uniform { scale: 0.5 };
    let mixer = EfficientModParams::build(&mut pb, "m", 4, 4, 2, 3).unwrap();
    pb.init = Init::default();
    let wrap = ResidualWrap::build(&mut pb, "w", 4, ls, dp, 0).unwrap();
    (wrap, mixer, params)
}

fn residual_out(wrap: &ResidualWrap, mixer: &EfficientModParams, params: &ParamSet, x: &Tensor, ctx: RunCtx) -> Tensor {
    run(params, x, |b, x| {
        wrap.forward(b, x, &ctx, |b, h| efficient_mod_block(b, h, mixer, FusionMode::Reshape))
    })
    .unwrap()
}

#[test]
fn residual_zero_layer_scale_is_identity() {
    let (wrap, mixer, mut params) = residual_setup(Some(1e-4), 0.0);
    *params.value_mut(wrap.layer_scale.unwrap()) = Tensor::zeros([1, 4, 1, 1]);
    let x = input([2, 4, 5, 5], 31);
    assert!(residual_out(&wrap, &mixer, &params, &x, RunCtx::eval()).bit_eq(&x));
}

#[test]
fn residual_forced_drop_is_identity() {
    let (wrap, mixer, params) = residual_setup(Some(1.0), 1.0 - 1e-9);
    let x = input([3, 4, 5, 5], 32);
    for step in 0..4 {
        assert!(residual_out(&wrap, &mixer, &params, &x, RunCtx::train(7, step)).bit_eq(&x));
    }
}

#[test]
fn residual_layer_scale_bounds_branch() {
    let (wrap, mixer, params) = residual_setup(Some(1e-4), 0.0);
    let x = input([1, 4, 5, 5], 33);
    let y = residual_out(&wrap, &mixer, &params, &x, RunCtx::eval());
    let h = layer_norm(&x, params.value(wrap.norm.gamma), params.value(wrap.norm.beta), wrap.norm.eps).unwrap();
    let inner = run(&params, &h, |b, h| efficient_mod_block(b, h, &mixer, FusionMode::Reshape)).unwrap();
    let max_inner = inner.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(y.max_abs_diff(&x) <= 1e-4 * max_inner * (1.0 + 1e-12));
    assert!(y.max_abs_diff(&x) > 0.0);
}

#[test]
fn patch_embed_downsizes_by_stride() {
    let mut params = ParamSet::new();
    let mut g = rng(34);
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    let stem = ConvLayer::patch(&mut pb, "stem", 3, 4, 7, 4, 3).unwrap();
    pb.bias = false;
    let down = ConvLayer::patch(&mut pb, "down", 4, 8, 3, 2, 1).unwrap();
    let x = input([1, 3, 224, 224], 35);
    assert_eq!(run(&params, &x, |b, x| patch_embed(b, x, &stem)).unwrap().shape(), [1, 4, 56, 56]);
    let zero = Tensor::zeros([1, 4, 56, 56]);
    let y = run(&params, &zero, |b, x| patch_embed(b, x, &down)).unwrap();
    assert_eq!(y.shape(), [1, 8, 28, 28]);
    assert!(is_zero(&y));
    let mut pb = ParamBuilder::new(&mut params, &mut g);
    assert!(matches!(ConvLayer::patch(&mut pb, "bad", 3, 4, 3, 4, 0), Err(Error::Config(_))));
}
