//! Desk-scale supervised training on a synthetic oriented-bar task.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{Backend, Eager, Tape};
use crate::blocks::RunCtx;
use crate::error::{precondition, Error, Result};
use crate::model::{build_model, build_preset, BuildOptions, Model};
use crate::params::ParamSet;
use crate::tensor::{cross_entropy, FuseOp, Tensor};

pub const IMAGE_SIZE: usize = 32;
/// Maximum offset of a bar's centre from the image centre, in pixels.
pub const JITTER: f64 = 4.0;
pub const DEFAULT_NOISE: f64 = 0.1;

/// Images `[n, 3, 32, 32]` of a single bar whose orientation is the label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub classes: usize,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the samples at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per = 3 * IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new([idx.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch shape");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Flattened pixels of sample `i`.
    pub fn pixels(&self, i: usize) -> &[f64] {
        let per = 3 * IMAGE_SIZE * IMAGE_SIZE;
        &self.images.data()[i * per..(i + 1) * per]
    }
}

/// Deterministic, class-balanced bars. `noise` is the standard deviation of
/// additive Gaussian pixel noise (0 for the noiseless variant).
pub fn gen_dataset(seed: u64, n: usize, classes: usize, noise: f64) -> Result<Dataset> {
    precondition!(classes >= 2, "need at least 2 classes, got {classes}");
    precondition!(n > 0 && n.is_multiple_of(classes), "sample count {n} is not a positive multiple of {classes}");
    precondition!(noise >= 0.0 && noise.is_finite(), "noise level {noise} must be finite and >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let s = IMAGE_SIZE;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let theta = PI * label as f64 / classes as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let cx = (s as f64 - 1.0) / 2.0 + rng.random_range(-JITTER..=JITTER);
        let cy = (s as f64 - 1.0) / 2.0 + rng.random_range(-JITTER..=JITTER);
        let half_len = rng.random_range(8.0..11.0);
        let color: [f64; 3] = [
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
        ];
        let mut plane = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                let a = (1.5 - across).clamp(0.0, 1.0);
                let b = (half_len - along.abs()).clamp(0.0, 1.0);
                plane[y * s + x] = a * b;
            }
        }
        for c in color {
            for &v in &plane {
                let eps = if noise > 0.0 { noise * gauss.sample(&mut rng) } else { 0.0 };
                data.push(c * v + eps);
            }
        }
        labels.push(label);
    }
    Ok(Dataset {
        seed,
        classes,
        images: Tensor::new([n, 3, s, s], data)?,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 4e-3,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub config: TrainConfig,
    /// Eval-mode training-set loss before the first step.
    pub initial_loss: f64,
    /// Eval-mode training-set loss after the last step.
    pub final_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_eval_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.eval_acc)
    }

    pub fn best_eval_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.eval_acc).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W, variant: &str) -> Result<()> {
        write_histories(&[(variant, self)], out)
    }
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    variant: &'a str,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_acc: f64,
    eval_acc: f64,
}

/// One CSV with a `variant` column, rows in (variant, epoch) order.
pub fn write_histories<W: Write>(histories: &[(&str, &TrainHistory)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (variant, h) in histories {
        for e in &h.epochs {
            w.serialize(HistoryRow {
                variant,
                epoch: e.epoch,
                lr: e.lr,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                eval_acc: e.eval_acc,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Decoupled-weight-decay Adam; decay applies to `Weight` arrays only.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update; `grads[i]` belongs to parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if params.get(id).role.is_weight() { self.weight_decay } else { 0.0 };
            let w = params.value_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                w[j] -= lr * (update + decay * w[j]);
            }
        }
    }
}

/// Mean loss and gradients for every parameter (zeros where unreachable).
pub fn loss_and_grads(model: &Model, images: &Tensor, labels: &[usize], run: &RunCtx) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(&model.params);
    let x = tape.constant(images.clone());
    let logits = model.forward(&mut tape, &x, run)?;
    let loss = tape.cross_entropy(&logits, labels)?;
    let value = tape.get(&loss).item()?;
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    let per_param = model
        .params
        .ids()
        .map(|id| grads.param_or_zeros(&model.params, id))
        .collect();
    Ok((value, per_param))
}

/// Eval-mode mean loss and accuracy over a dataset, in fixed chunks.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    precondition!(!data.is_empty(), "cannot evaluate on an empty dataset");
    let chunk = 64;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk) {
        let (x, y) = data.batch(part);
        let mut b = Eager::new(&model.params);
        let xv = b.input(&x);
        let logits = model.forward(&mut b, &xv, &RunCtx::eval())?;
        let (loss, probs) = cross_entropy(&logits, &y)?;
        loss_sum += loss * part.len() as f64;
        let k = probs.c();
        for (i, &label) in y.iter().enumerate() {
            let row = &probs.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(j, _)| j);
            correct += usize::from(pred == label);
        }
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Cross-entropy training with AdamW and cosine decay. Deterministic given
/// `cfg.seed`: the data order and drop-path masks derive from it.
pub fn train(model: &mut Model, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    precondition!(
        model.classes() == train_set.classes && model.classes() == eval_set.classes,
        "model has {} classes but the datasets have {} and {}",
        model.classes(),
        train_set.classes,
        eval_set.classes
    );
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let (initial_loss, _) = evaluate(model, train_set)?;
    let mut opt = AdamW::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for part in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.lr, step, total);
            let (x, y) = train_set.batch(part);
            let run = RunCtx::train(cfg.seed, step as u64);
            let (loss, grads) = match loss_and_grads(model, &x, &y, &run) {
                Ok(v) => v,
                Err(Error::Numerical(msg)) => {
                    return Err(Error::Numerical(format!("step {step} (lr {lr:e}): {msg}")))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {loss} at step {step} (lr {lr:e})")));
            }
            opt.step(&mut model.params, &grads, lr);
            loss_sum += loss * part.len() as f64;
            step += 1;
        }
        let (_, train_acc) = evaluate(model, train_set)?;
        let (_, eval_acc) = evaluate(model, eval_set)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            eval_acc,
        });
    }
    let (final_loss, _) = evaluate(model, train_set)?;
    Ok(TrainHistory {
        config: *cfg,
        initial_loss,
        final_loss,
        epochs,
    })
}

/// Standard desk-scale run: micro preset on the 4-class bar task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise: f64,
    pub data_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            train_samples: 512,
            eval_samples: 256,
            noise: DEFAULT_NOISE,
            data_seed: 1,
        }
    }
}

pub fn task_datasets(task: &TaskConfig, classes: usize) -> Result<(Dataset, Dataset)> {
    Ok((
        gen_dataset(task.data_seed, task.train_samples, classes, task.noise)?,
        gen_dataset(task.data_seed.wrapping_add(1_000_003), task.eval_samples, classes, task.noise)?,
    ))
}

/// Result of the modulation-versus-summation ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub mul: TrainHistory,
    pub sum: TrainHistory,
    pub params: usize,
}

/// Trains the micro preset twice from bit-identical initial parameters and
/// data order, once with multiplicative fusion and once with addition.
pub fn ablate_fusion(seed: u64, task: &TaskConfig, cfg: &TrainConfig) -> Result<Ablation> {
    let spec = build_preset("micro")?;
    let opts = BuildOptions::seeded(seed);
    let mut mul = build_model(&spec, &opts)?;
    let mut sum = build_model(&spec, &BuildOptions { fuse_op: FuseOp::Sum, ..opts })?;
    if mul.params != sum.params {
        return Err(Error::Numerical("ablation variants start from different parameters".into()));
    }
    let (train_set, eval_set) = task_datasets(task, spec.head.classes)?;
    let cfg = TrainConfig { seed, ..*cfg };
    Ok(Ablation {
        params: mul.params.total_len(),
        mul: train(&mut mul, &train_set, &eval_set, &cfg)?,
        sum: train(&mut sum, &train_set, &eval_set, &cfg)?,
    })
}

/// Leading bytes of the binary parameter format.
pub const PARAMS_MAGIC: &[u8; 8] = b"EFFMODP\0";
pub const PARAMS_VERSION: u32 = 1;
/// Dtype tag for little-endian IEEE-754 binary64.
pub const DTYPE_F64: u8 = 1;

/// Serializes every array: magic, version, count, then per array the name,
/// rank-4 shape, dtype tag and little-endian data.
pub fn write_params<W: Write>(params: &ParamSet, mut out: W) -> Result<()> {
    out.write_all(PARAMS_MAGIC)?;
    out.write_all(&PARAMS_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&[DTYPE_F64])?;
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    write_params(params, std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a parameter file into the matching arrays of `params`, checking
/// names, order and shapes. `params` is untouched when reading fails.
pub fn read_params_into<R: Read>(params: &mut ParamSet, input: R) -> Result<()> {
    let mut staged = params.clone();
    read_staged(&mut staged, input)?;
    *params = staged;
    Ok(())
}

fn read_staged<R: Read>(params: &mut ParamSet, mut input: R) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(format!("parameter file: {msg}")));
    if &read_array::<8>(&mut input)? != PARAMS_MAGIC {
        return bad("bad magic".into());
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != PARAMS_VERSION {
        return bad(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?) as usize;
    if count != params.len() {
        return bad(format!("{count} arrays, model has {}", params.len()));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut name = vec![0; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let expected = params.get(id).name.clone();
        if name != expected {
            return bad(format!("array '{name}' where '{expected}' was expected"));
        }
        let rank = u32::from_le_bytes(read_array(&mut input)?) as usize;
        if rank != 4 {
            return bad(format!("'{name}' has rank {rank}, expected 4"));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = u64::from_le_bytes(read_array(&mut input)?) as usize;
        }
        if shape != params.value(id).shape() {
            return bad(format!("'{name}' has shape {shape:?}, model expects {:?}", params.value(id).shape()));
        }
        let [dtype] = read_array::<1>(&mut input)?;
        if dtype != DTYPE_F64 {
            return bad(format!("'{name}' has unsupported dtype tag {dtype}"));
        }
        for v in params.value_mut(id).data_mut() {
            *v = f64::from_le_bytes(read_array(&mut input)?);
        }
    }
    Ok(())
}

pub fn load_params_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    read_params_into(params, std::io::BufReader::new(std::fs::File::open(path)?))
}
