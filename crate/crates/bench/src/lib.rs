//! Shared fixtures for the criterion benches.

use effmod::blocks::{EfficientModParams, MbConvParams};
use effmod::{ParamBuilder, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn input(c: usize, side: usize, seed: u64) -> Tensor {
    Tensor::uniform([1, c, side, side], -1.0, 1.0, &mut rng(seed))
}

/// Same-padded conv weight `[c_out, c_in / groups, k, k]`.
pub fn conv_weight(c_out: usize, c_in_per_group: usize, k: usize, seed: u64) -> Tensor {
    Tensor::uniform([c_out, c_in_per_group, k, k], -0.1, 0.1, &mut rng(seed))
}

pub fn efficient_mod(c: usize, r: usize, k: usize, seed: u64) -> (ParamSet, EfficientModParams) {
    let mut params = ParamSet::new();
    let mut g = rng(seed);
    let block = EfficientModParams::build(&mut ParamBuilder::new(&mut params, &mut g), "block", c, c, r, k)
        .expect("valid block config");
    (params, block)
}

pub fn mbconv(c: usize, r: usize, k: usize, seed: u64) -> (ParamSet, MbConvParams) {
    let mut params = ParamSet::new();
    let mut g = rng(seed);
    let block = MbConvParams::build(&mut ParamBuilder::new(&mut params, &mut g), "block", c, r, k)
        .expect("valid block config");
    (params, block)
}
