//! One PASS/FAIL line per acceptance criterion, each with its runtime budget.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use effmod::analyzer::{analyze, analyze_block, degree_probe};
use effmod::autodiff::{grad_check_shapes, BlockKind};
use effmod::bench::check_pair_params;
use effmod::model::{build_model, build_preset, isotropic_pairs, BuildOptions, Model};
use effmod::params::{ParamBuilder, ParamSet};
use effmod::trainer::{ablate_fusion, task_datasets, train, write_histories, TaskConfig, TrainConfig};
use effmod::blocks::EfficientModParams;
use effmod::{FusionMode, Tensor};

type Outcome = Result<String, String>;

const PARAM_TARGETS: [(&str, f64, f64); 4] = [("xxs", 4.7e6, 0.08), ("xs", 6.6e6, 0.08), ("s", 12.9e6, 0.08), ("s_conv", 12.9e6, 0.03)];
const MAC_TARGETS: [(&str, f64); 3] = [("xxs", 0.6e9), ("xs", 0.8e9), ("s", 1.4e9)];
const MAC_TOLERANCE: f64 = 0.10;
const GRAD_TOLERANCE: f64 = 1e-5;
const FUSION_CONFIGS: usize = 100;
const PAIR_TOLERANCE: f64 = 0.02;
const ISO_196_TARGET: f64 = 6.4e6;
const ISO_196_TOLERANCE: f64 = 0.08;
const TRAIN_ACCURACY: f64 = 0.90;
const TRAIN_SEED: u64 = 0;

fn rel(got: f64, want: f64) -> f64 {
    (got - want) / want
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn closed_form_identity() -> Outcome {
    let mut bad = Vec::new();
    let mut total = 0;
    for c in [8, 16, 64] {
        for r in [1, 4, 6] {
            for k in [3, 5, 7] {
                let mut params = ParamSet::new();
                let mut g = common::rng(0);
                let mut pb = ParamBuilder::new(&mut params, &mut g);
                pb.bias = false;
                let block = EfficientModParams::build(&mut pb, "b", c, c, r, k).map_err(|e| e.to_string())?;
                let d = analyze_block(&params, &block, 1, 1).map_err(|e| e.to_string())?;
                total += 1;
                if d.params_counted != d.params_closed || d.params_counted as usize != params.total_len() {
                    bad.push(format!("C={c} r={r} k={k}: {} vs {}", d.params_counted, d.params_closed));
                }
            }
        }
    }
    check(bad.is_empty(), format!("{}/{total} exact {}", total - bad.len(), bad.join("; ")))
}

fn preset_params() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, target, tol) in PARAM_TARGETS {
        let spec = build_preset(name).map_err(|e| e.to_string())?;
        let model = build_model(&spec, &BuildOptions::default()).map_err(|e| e.to_string())?;
        let p = analyze(&model, 224).map_err(|e| e.to_string())?.total_params() as f64;
        let d = rel(p, target);
        ok &= d.abs() <= tol;
        let has_attn = spec.stages.iter().any(|s| s.attn_blocks > 0);
        let calib = if has_attn { format!(" mlp_ratio={}", spec.attention.mlp_ratio) } else { String::new() };
        parts.push(format!("{name} {:.3}M ({:+.1}%, tol {:.0}%{calib})", p / 1e6, d * 100.0, tol * 100.0));
    }
    check(ok, parts.join(", "))
}

fn preset_macs() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, target) in MAC_TARGETS {
        let model = Model::from_preset(name, &BuildOptions::default()).map_err(|e| e.to_string())?;
        let m = analyze(&model, 224).map_err(|e| e.to_string())?.total_macs() as f64;
        let d = rel(m, target);
        ok &= d.abs() <= MAC_TOLERANCE;
        parts.push(format!("{name} {:.3}G ({:+.1}%)", m / 1e9, d * 100.0));
    }
    check(ok, parts.join(", "))
}

fn fusion_equivalence() -> Outcome {
    let mut g = common::rng(404);
    let mut mismatches = Vec::new();
    for i in 0..FUSION_CONFIGS {
        let (c, r, k, shape, seed) = common::random_fusion_case(&mut g);
        let (ya, ga) = common::effmod_forward_backward(c, r, k, shape, seed, FusionMode::Repeat);
        let (yb, gb) = common::effmod_forward_backward(c, r, k, shape, seed, FusionMode::Reshape);
        if !ya.bit_eq(&yb) || ga.len() != gb.len() || ga.iter().zip(&gb).any(|(a, b)| !a.bit_eq(b)) {
            mismatches.push(format!("#{i} c={c} r={r} k={k} {shape:?}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!("{}/{FUSION_CONFIGS} configurations bit-identical (outputs and gradients) {}", FUSION_CONFIGS - mismatches.len(), mismatches.join("; ")),
    )
}

fn gradient_certification() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in BlockKind::ALL {
        let reports = grad_check_shapes(kind, GRAD_TOLERANCE).map_err(|e| e.to_string())?;
        let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        ok &= reports.len() >= 3 && reports.iter().all(|r| r.passed());
        parts.push(format!("{kind} {}x {worst:.1e}", reports.len()));
    }
    check(ok, format!("worst rel err per kind (tol {GRAD_TOLERANCE:e}): {}", parts.join(", ")))
}

fn kernel_oracles() -> Outcome {
    let worst = common::oracle_sweep(600);
    let names = ["conv2d", "matmul", "softmax", "layer_norm"];
    let parts: Vec<String> = names.iter().zip(worst).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst.iter().all(|&e| e <= common::ORACLE_TOL),
        format!("{} cases each, worst {}", common::ORACLE_CASES, parts.join(", ")),
    )
}

fn degree_doubling() -> Outcome {
    let got: Vec<usize> = (0..=10).map(|l| degree_probe(l, 0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let ok = got.iter().enumerate().all(|(l, &d)| d == 1 << l);
    check(ok, format!("degrees {got:?}"))
}

fn architecture_ladder() -> Outcome {
    let model = Model::from_preset("s", &BuildOptions::default()).map_err(|e| e.to_string())?;
    let x = Tensor::uniform([1, 3, 224, 224], 0.0, 1.0, &mut common::rng(8));
    let (logits, shapes) = model.trace(&x).map_err(|e| e.to_string())?;
    let sides: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    let ok = sides == [56, 28, 14, 7]
        && shapes.iter().all(|s| s[2] == s[3])
        && logits.shape() == [1, model.classes(), 1, 1]
        && model.classes() == 1000
        && logits.is_finite();
    check(ok, format!("stage sides {sides:?}, logits {:?}", logits.shape()))
}

fn isotropic_pairing() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, a, b) in isotropic_pairs() {
        let (pa, pb) = check_pair_params(&a, &b).map_err(|e| e.to_string())?;
        let delta = (pa as f64 - pb as f64).abs() / pb as f64;
        ok &= delta <= PAIR_TOLERANCE;
        if name == "iso_196x11" {
            let d = rel(pa as f64, ISO_196_TARGET);
            ok &= d.abs() <= ISO_196_TOLERANCE;
            parts.push(format!("{name}: mod {:.3}M ({:+.1}% vs 6.4M) mbconv {:.3}M, delta {:.2}%", pa as f64 / 1e6, d * 100.0, pb as f64 / 1e6, delta * 100.0));
        } else {
            parts.push(format!("{name}: mod {:.3}M mbconv {:.3}M, delta {:.2}%", pa as f64 / 1e6, pb as f64 / 1e6, delta * 100.0));
        }
    }
    check(ok, parts.join("; "))
}

fn desk_scale_training() -> Outcome {
    let err = |e: effmod::Error| e.to_string();
    let task = TaskConfig::default();
    let (train_set, eval_set) = task_datasets(&task, 4).map_err(err)?;
    let cfg = TrainConfig { seed: TRAIN_SEED, ..TrainConfig::default() };
    let mut spec = build_preset("micro").map_err(err)?;
    spec.head.classes = 4;
    let run = || -> effmod::Result<_> {
        let mut model = build_model(&spec, &BuildOptions::seeded(TRAIN_SEED))?;
        train(&mut model, &train_set, &eval_set, &cfg)
    };
    let first = run().map_err(err)?;
    let second = run().map_err(err)?;
    let acc = first.final_eval_acc();
    let reached = first.epochs.iter().find(|e| e.eval_acc >= TRAIN_ACCURACY).map(|e| e.epoch);
    let deterministic = first == second;

    let ablation = ablate_fusion(TRAIN_SEED, &task, &cfg).map_err(err)?;
    let mut csv = Vec::new();
    write_histories(&[("mul", &ablation.mul), ("sum", &ablation.sum)], &mut csv).map_err(err)?;
    let rows = String::from_utf8_lossy(&csv).lines().count() - 1;
    let paired = rows == 2 * cfg.epochs && ablation.mul.epochs.len() == ablation.sum.epochs.len();
    check(
        acc >= TRAIN_ACCURACY && deterministic && paired,
        format!(
            "micro final eval acc {:.3} after {} epochs (>= {TRAIN_ACCURACY} first at epoch {}), rerun identical: {deterministic}; ablation {rows} paired csv rows, final eval acc mul {:.3} / sum {:.3} (reported only)",
            acc,
            cfg.epochs,
            reached.map_or("never".into(), |e| e.to_string()),
            ablation.mul.final_eval_acc(),
            ablation.sum.final_eval_acc()
        ),
    )
}

fn readme_statement() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read README.md: {e}"))?;
    let lower = text.to_lowercase();
    let needles = ["imagenet", "distillation", "coco", "ade20k", "latency", "out of desk-scale reach", "ratio"];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !lower.contains(n)).collect();
    check(missing.is_empty(), if missing.is_empty() { "README declares the out-of-reach results".into() } else { format!("README lacks {missing:?}") })
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("closed-form parameter identity", Duration::from_secs(1), closed_form_identity),
        ("preset parameter reproduction", Duration::from_secs(10), preset_params),
        ("MAC reproduction at 224", Duration::from_secs(10), preset_macs),
        ("fusion equivalence", Duration::from_secs(30), fusion_equivalence),
        ("gradient certification", Duration::from_secs(300), gradient_certification),
        ("kernel oracles", Duration::from_secs(120), kernel_oracles),
        ("degree doubling", Duration::from_secs(30), degree_doubling),
        ("architecture ladder", Duration::from_secs(30), architecture_ladder),
        ("isotropic pairing", Duration::from_secs(10), isotropic_pairing),
        ("desk-scale training", Duration::from_secs(900), desk_scale_training),
        ("non-reproducibility statement", Duration::from_secs(1), readme_statement),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let (ok, detail) = match outcome {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        let budget_note = if in_budget { "" } else { " OVER BUDGET" };
        println!(
            "{} {:>2}. {name}: {detail} [{:.2}s / {}s{budget_note}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
