use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use effmod::autodiff::Eager;
use effmod::blocks::{efficient_mod_block, mbconv_block};
use effmod::FusionMode;
use effmod_bench::{efficient_mod, input, mbconv};
use std::hint::black_box;

fn fusion_modes(c: &mut Criterion) {
    let (params, block) = efficient_mod(144, 6, 7, 7);
    let x = input(144, 14, 8);
    let mut group = c.benchmark_group("effmod_fusion_144x14_r6");
    group.sample_size(20);
    for (name, mode) in [("repeat", FusionMode::Repeat), ("reshape", FusionMode::Reshape)] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut e = Eager::new(&params);
                let xv = e.input(black_box(&x));
                efficient_mod_block(&mut e, &xv, &block, mode).unwrap()
            })
        });
    }
    group.finish();
}

fn block_pair(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_pair_14x14");
    group.sample_size(20);
    for ch in [196, 256] {
        let x = input(ch, 14, 9);
        let (ep, eb) = efficient_mod(ch, 6, 7, 10);
        let (mp, mb) = mbconv(ch, 7, 3, 11);
        group.bench_with_input(BenchmarkId::new("effmod", ch), &(), |b, _| {
            b.iter(|| {
                let mut e = Eager::new(&ep);
                let xv = e.input(black_box(&x));
                efficient_mod_block(&mut e, &xv, &eb, FusionMode::Reshape).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("mbconv", ch), &(), |b, _| {
            b.iter(|| {
                let mut e = Eager::new(&mp);
                let xv = e.input(black_box(&x));
                mbconv_block(&mut e, &xv, &mb).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(blocks, fusion_modes, block_pair);
criterion_main!(blocks);
