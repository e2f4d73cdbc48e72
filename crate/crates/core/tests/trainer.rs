mod common;

use effmod::blocks::RunCtx;
use effmod::model::{build_model, build_preset, BuildOptions, Model};
use effmod::trainer::*;
use effmod::Error;
use nalgebra::DMatrix;

fn micro(seed: u64) -> Model {
    build_model(&build_preset("micro").unwrap(), &BuildOptions::seeded(seed)).unwrap()
}

fn small_task() -> (Dataset, Dataset) {
    let task = TaskConfig {
        train_samples: 128,
        eval_samples: 64,
        ..TaskConfig::default()
    };
    task_datasets(&task, 4).unwrap()
}

#[test]
fn datasets_are_deterministic_and_balanced() {
    let a = gen_dataset(5, 40, 4, 0.1).unwrap();
    assert_eq!(a, gen_dataset(5, 40, 4, 0.1).unwrap());
    assert_ne!(a.images, gen_dataset(6, 40, 4, 0.1).unwrap().images);
    let mut hist = [0; 4];
    for &l in &a.labels {
        hist[l] += 1;
    }
    assert_eq!(hist, [10; 4]);
    assert_eq!(a.images.shape(), [40, 3, IMAGE_SIZE, IMAGE_SIZE]);
    assert!(matches!(gen_dataset(0, 10, 4, 0.0), Err(Error::Precondition(_))));
    assert!(matches!(gen_dataset(0, 10, 1, 0.0), Err(Error::Precondition(_))));
}

/// Ridge regression onto one-hot targets, solved in the n×n dual.
#[test]
fn noiseless_task_is_linearly_learnable() {
    let (classes, n_train, n_eval) = (4, 800, 400);
    let train = gen_dataset(21, n_train, classes, 0.0).unwrap();
    let eval = gen_dataset(22, n_eval, classes, 0.0).unwrap();
    let dim = 3 * IMAGE_SIZE * IMAGE_SIZE + 1;
    let features = |d: &Dataset, i: usize| d.pixels(i).iter().copied().chain([1.0]).collect::<Vec<_>>();
    let x = DMatrix::from_fn(n_train, dim, |i, j| features(&train, i)[j]);
    let y = DMatrix::from_fn(n_train, classes, |i, k| f64::from(train.labels[i] == k));
    let gram = &x * x.transpose() + DMatrix::identity(n_train, n_train) * 1e-3;
    let alpha = gram.cholesky().expect("positive definite").solve(&y);
    let w = x.transpose() * alpha;
    let xe = DMatrix::from_fn(n_eval, dim, |i, j| features(&eval, i)[j]);
    let scores = xe * w;
    let correct = (0..n_eval)
        .filter(|&i| scores.row(i).transpose().argmax().0 == eval.labels[i])
        .count();
    let acc = correct as f64 / n_eval as f64;
    assert!(acc > 0.70, "linear baseline accuracy {acc}");
}

#[test]
fn zero_learning_rate_keeps_loss() {
    let (train_set, eval_set) = small_task();
    let mut model = micro(0);
    let before = model.params.clone();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, ..TrainConfig::default() };
    let h = train(&mut model, &train_set, &eval_set, &cfg).unwrap();
    assert!((h.final_loss - h.initial_loss).abs() <= 1e-9);
    assert_eq!(model.params, before);
}

#[test]
fn one_small_step_decreases_sample_loss() {
    let data = gen_dataset(3, 4, 4, 0.1).unwrap();
    let (x, y) = data.batch(&[2]);
    let mut model = micro(1);
    let (loss0, grads) = loss_and_grads(&model, &x, &y, &RunCtx::eval()).unwrap();
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    AdamW::new(&model.params, &cfg).step(&mut model.params, &grads, 1e-5);
    let (loss1, _) = loss_and_grads(&model, &x, &y, &RunCtx::eval()).unwrap();
    assert!(loss1 < loss0, "{loss1} >= {loss0}");
}

#[test]
fn every_parameter_receives_gradient() {
    let data = gen_dataset(4, 16, 4, 0.1).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let (x, y) = data.batch(&idx);
    let mut model = micro(2);
    let run = RunCtx::train(0, 0);
    let (_, grads) = loss_and_grads(&model, &x, &y, &run).unwrap();
    AdamW::new(&model.params, &TrainConfig::default()).step(&mut model.params, &grads, 1e-3);
    let (_, grads) = loss_and_grads(&model, &x, &y, &RunCtx::train(0, 1)).unwrap();
    for ((_, p), g) in model.params.iter().zip(&grads) {
        let norm: f64 = g.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{} has zero gradient", p.name);
    }
}

#[test]
fn training_is_deterministic_and_eval_is_repeatable() {
    let (train_set, eval_set) = small_task();
    let cfg = TrainConfig { epochs: 2, seed: 9, ..TrainConfig::default() };
    let (mut a, mut b) = (micro(3), micro(3));
    let ha = train(&mut a, &train_set, &eval_set, &cfg).unwrap();
    let hb = train(&mut b, &train_set, &eval_set, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert_eq!(evaluate(&a, &eval_set).unwrap(), evaluate(&a, &eval_set).unwrap());
}

#[test]
fn class_mismatch_is_rejected() {
    let (train_set, eval_set) = small_task();
    let mut model = Model::from_preset("xxs", &BuildOptions::default()).unwrap();
    let err = train(&mut model, &train_set, &eval_set, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
    assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
    assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
}

#[test]
fn ablation_pairs_share_init_and_both_learn() {
    let task = TaskConfig {
        train_samples: 128,
        eval_samples: 64,
        ..TaskConfig::default()
    };
    let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
    let ab = ablate_fusion(0, &task, &cfg).unwrap();
    assert_eq!(ab.params, micro(0).params.total_len());
    for h in [&ab.mul, &ab.sum] {
        assert!(h.final_loss < h.initial_loss);
        assert_eq!(h.epochs.len(), 4);
    }
    let mut csv = Vec::new();
    write_histories(&[("mul", &ab.mul), ("sum", &ab.sum)], &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert!(text.lines().nth(1).unwrap().starts_with("mul,"));
    assert!(text.lines().last().unwrap().starts_with("sum,"));
}

#[test]
fn params_round_trip_through_binary_format() {
    let src = micro(7);
    let mut buf = Vec::new();
    write_params(&src.params, &mut buf).unwrap();
    assert_eq!(&buf[..8], PARAMS_MAGIC);
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), PARAMS_VERSION);
    let mut dst = micro(8);
    assert_ne!(dst.params, src.params);
    read_params_into(&mut dst.params, buf.as_slice()).unwrap();
    assert_eq!(dst.params, src.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("micro.bin");
    save_params(&src.params, &path).unwrap();
    let mut again = micro(9);
    load_params_into(&mut again.params, &path).unwrap();
    assert_eq!(again.params, src.params);
}

#[test]
fn corrupt_params_leave_model_untouched() {
    let src = micro(7);
    let mut buf = Vec::new();
    write_params(&src.params, &mut buf).unwrap();
    let mut dst = micro(8);
    let before = dst.params.clone();
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(read_params_into(&mut dst.params, bad_magic.as_slice()).is_err());
    assert!(read_params_into(&mut dst.params, &buf[..buf.len() - 3]).is_err());
    let other = Model::from_preset("xxs", &BuildOptions::default()).unwrap();
    let mut foreign = Vec::new();
    write_params(&other.params, &mut foreign).unwrap();
    assert!(read_params_into(&mut dst.params, foreign.as_slice()).is_err());
    assert_eq!(dst.params, before);
}
