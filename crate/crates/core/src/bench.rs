//! Wall-clock microbenchmarks under a fixed worker budget.
//!
//! Each iteration is timed individually with a monotonic clock; outputs are
//! fingerprinted outside the timed region so any nondeterminism aborts the
//! run instead of polluting the statistics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analyzer::analyze;
use crate::autodiff::Eager;
use crate::blocks::{efficient_mod_block, EfficientModParams};
use crate::error::{Error, Result};
use crate::model::{build_isotropic, BuildOptions, IsotropicSpec, Model};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{FusionMode, Tensor};

pub const DEFAULT_WARMUP: usize = 50;
pub const DEFAULT_ITERS: usize = 4000;
pub const DEFAULT_THREADS: usize = 4;
/// Coefficient of variation above which a run is flagged unstable.
pub const UNSTABLE_CV: f64 = 0.20;
/// Environment variable overriding the default worker budget.
pub const THREADS_ENV: &str = "EFFMOD_THREADS";

/// Worker budget from `EFFMOD_THREADS`, else [`DEFAULT_THREADS`].
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(DEFAULT_THREADS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            iters: DEFAULT_ITERS,
            threads: default_threads(),
        }
    }
}

/// Values a benchmarked callable can return for determinism checks.
pub trait Fingerprint {
    fn fingerprint(&self) -> u64;
}

impl Fingerprint for Tensor {
    fn fingerprint(&self) -> u64 {
        Tensor::fingerprint(self)
    }
}

impl Fingerprint for () {
    fn fingerprint(&self) -> u64 {
        0
    }
}

impl Fingerprint for u64 {
    fn fingerprint(&self) -> u64 {
        *self
    }
}

/// Summary statistics of a sample vector, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub cv: f64,
}

impl Stats {
    /// Order-independent: every statistic is a function of the sorted samples.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len().max(1) as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = if sorted.len() > 1 {
            sorted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        Self {
            mean_ms: mean,
            std_ms: std,
            p50_ms: percentile(&sorted, 0.50),
            p90_ms: percentile(&sorted, 0.90),
            cv: if mean > 0.0 { std / mean } else { 0.0 },
        }
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub experiment: String,
    pub mode: String,
    pub shape: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub cv: f64,
    pub unstable: bool,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl BenchResult {
    pub fn stats(&self) -> Stats {
        Stats::from_samples(&self.samples)
    }
}

/// Times `f` for `protocol.iters` iterations after `protocol.warmup`
/// untimed ones, inside a pool of exactly `protocol.threads` workers.
pub fn bench<T, F>(experiment: &str, mode: &str, shape: &str, protocol: Protocol, f: F) -> Result<BenchResult>
where
    T: Fingerprint,
    F: FnMut() -> T + Send,
{
    if protocol.iters == 0 {
        return Err(Error::Config("benchmark needs at least one measured iteration".into()));
    }
    if protocol.threads == 0 {
        return Err(Error::Config("benchmark needs at least one thread".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(protocol.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {}-thread pool: {e}", protocol.threads)))?;
    let samples = pool.install(move || -> Result<Vec<f64>> {
        let mut f = f;
        let reference = f().fingerprint();
        let check = |got: u64, i: usize| {
            if got != reference {
                return Err(Error::Numerical(format!(
                    "nondeterministic output at iteration {i}: {got:016x} != {reference:016x}"
                )));
            }
            Ok(())
        };
        for i in 0..protocol.warmup {
            check(f().fingerprint(), i)?;
        }
        let mut samples = Vec::with_capacity(protocol.iters);
        for i in 0..protocol.iters {
            let start = Instant::now();
            let out = f();
            let elapsed = start.elapsed();
            check(out.fingerprint(), protocol.warmup + i)?;
            samples.push(elapsed.as_secs_f64() * 1e3);
        }
        Ok(samples)
    })?;
    let s = Stats::from_samples(&samples);
    Ok(BenchResult {
        experiment: experiment.into(),
        mode: mode.into(),
        shape: shape.into(),
        mean_ms: s.mean_ms,
        std_ms: s.std_ms,
        p50_ms: s.p50_ms,
        p90_ms: s.p90_ms,
        cv: s.cv,
        unstable: s.cv > UNSTABLE_CV,
        warmup: protocol.warmup,
        iters: protocol.iters,
        threads: protocol.threads,
        samples,
    })
}

pub fn write_csv<W: Write>(results: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(results: &[BenchResult], path: &Path) -> Result<()> {
    write_csv(results, std::fs::File::create(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBench {
    pub repeat: BenchResult,
    pub reshape: BenchResult,
}

impl FusionBench {
    /// `repeat_mean / reshape_mean`.
    pub fn ratio(&self) -> f64 {
        self.repeat.mean_ms / self.reshape.mean_ms
    }
}

/// One EfficientMod block benchmarked under both fusion modes on identical
/// inputs. Outputs must agree bit for bit before anything is timed.
pub fn bench_fusion_modes(c: usize, r: usize, h: usize, w: usize, protocol: Protocol, seed: u64) -> Result<FusionBench> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = EfficientModParams::build(&mut ParamBuilder::new(&mut params, &mut rng), "block", c, c, r, 7)?;
    let x = Tensor::uniform([1, c, h, w], -1.0, 1.0, &mut rng);
    let run = |mode: FusionMode| -> Result<Tensor> {
        let mut b = Eager::new(&params);
        let xv = b.input(&x);
        Ok(efficient_mod_block(&mut b, &xv, &block, mode)?.into_owned())
    };
    let (a, bb) = (run(FusionMode::Repeat)?, run(FusionMode::Reshape)?);
    if !a.bit_eq(&bb) {
        return Err(Error::Numerical(format!(
            "fusion modes disagree (max |diff| {:e}); refusing to time",
            a.max_abs_diff(&bb)
        )));
    }
    let shape = format!("1x{c}x{h}x{w} r={r}");
    let timed = |mode: FusionMode, name: &str| {
        bench("fusion", name, &shape, protocol, || run(mode).expect("validated forward"))
    };
    Ok(FusionBench {
        repeat: timed(FusionMode::Repeat, "repeat")?,
        reshape: timed(FusionMode::Reshape, "reshape")?,
    })
}

/// Allowed relative parameter mismatch between the two members of a pair.
pub const PAIR_PARAM_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PairBench {
    pub name: String,
    pub params_mod: u64,
    pub params_mbconv: u64,
    pub efficient_mod: BenchResult,
    pub mbconv: BenchResult,
}

impl PairBench {
    /// `|p_mod − p_mbconv| / p_mbconv`.
    pub fn param_delta(&self) -> f64 {
        (self.params_mod as f64 - self.params_mbconv as f64).abs() / self.params_mbconv as f64
    }
}

fn compare_params(pa: u64, pb: u64) -> Result<()> {
    let delta = (pa as f64 - pb as f64).abs() / pb as f64;
    if delta > PAIR_PARAM_TOLERANCE {
        return Err(Error::Config(format!(
            "pair parameters differ by {:.2}% ({pa} vs {pb}), limit {:.0}%",
            delta * 100.0,
            PAIR_PARAM_TOLERANCE * 100.0
        )));
    }
    Ok(())
}

fn iso_params(m: &Model, spec: &IsotropicSpec) -> Result<u64> {
    Ok(analyze(m, spec.patch * 16)?.total_params())
}

/// Parameter totals of an isotropic pair, failing when they differ by more
/// than [`PAIR_PARAM_TOLERANCE`].
pub fn check_pair_params(a: &IsotropicSpec, b: &IsotropicSpec) -> Result<(u64, u64)> {
    let opts = BuildOptions::default();
    let pa = iso_params(&build_isotropic(a, &opts)?, a)?;
    let pb = iso_params(&build_isotropic(b, &opts)?, b)?;
    compare_params(pa, pb)?;
    Ok((pa, pb))
}

/// Benchmarks whole isotropic models at batch 1 and input side `res`.
pub fn bench_pair_mbconv(
    name: &str,
    efficient_mod: &IsotropicSpec,
    mbconv: &IsotropicSpec,
    res: usize,
    protocol: Protocol,
) -> Result<PairBench> {
    let opts = BuildOptions::default();
    let ma = build_isotropic(efficient_mod, &opts)?;
    let mb = build_isotropic(mbconv, &opts)?;
    let (params_mod, params_mbconv) = (iso_params(&ma, efficient_mod)?, iso_params(&mb, mbconv)?);
    compare_params(params_mod, params_mbconv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform([1, 3, res, res], 0.0, 1.0, &mut rng);
    for (label, m) in [("effmod", &ma), ("mbconv", &mb)] {
        let y = m.logits(&x)?;
        if !y.is_finite() {
            return Err(Error::Numerical(format!("{name}: {label} produced non-finite logits")));
        }
    }
    let shape = format!("1x3x{res}x{res}");
    let efficient_mod = bench(name, "effmod", &shape, protocol, || ma.logits(&x).expect("probed"))?;
    let mbconv = bench(name, "mbconv", &shape, protocol, || mb.logits(&x).expect("probed"))?;
    Ok(PairBench {
        name: name.into(),
        params_mod,
        params_mbconv,
        efficient_mod,
        mbconv,
    })
}
