use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use effmod::analyzer::{analyze, degree_probe};
use effmod::autodiff::{grad_check_shapes, BlockKind, GradCheckReport};
use effmod::bench::{self as harness, bench, bench_fusion_modes, bench_pair_mbconv, BenchResult, Protocol};
use effmod::model::{
    build_model, build_preset, isotropic_pairs, isotropic_preset, isotropic_preset_names, Arch,
    BuildOptions, Model, ModelSpec, PRESETS,
};
use effmod::trainer::{self, ablate_fusion, task_datasets, write_histories, TaskConfig, TrainConfig};
use effmod::viz::{context_map, Image};
use effmod::{Error, Tensor};

const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "effmod", version, about = "Efficient modulation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC report for a preset or a JSON spec file.
    Analyze {
        target: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient certification of one block kind or `all`.
    Gradcheck {
        block: String,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Latency experiments: `fusion`, `pair` or `model`.
    Bench {
        experiment: String,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = harness::DEFAULT_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = harness::DEFAULT_WARMUP)]
        warmup: usize,
        /// Channels of the fusion block.
        #[arg(long, default_value_t = 144)]
        channels: usize,
        /// Expansion ratio of the fusion block.
        #[arg(long, default_value_t = 6)]
        ratio: usize,
        /// Spatial side of the fusion block input.
        #[arg(long, default_value_t = 14)]
        size: usize,
        /// Isotropic pair for `pair`.
        #[arg(long, default_value = "iso_196x11")]
        pair: String,
        /// Preset for `model`.
        #[arg(long, default_value = "xxs")]
        preset: String,
        /// Input side for `pair` and `model`.
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a preset (4-class head) on the synthetic bar task.
    Train {
        #[arg(long, default_value = "micro")]
        preset: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write final parameters in the binary format.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Multiplication versus summation fusion on the micro preset.
    AblateFusion {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Channel-mean context map of one modulation block, written as P5.
    Ctxmap {
        preset: String,
        image: PathBuf,
        /// One-based stage.
        #[arg(long)]
        stage: usize,
        /// One-based block within the stage.
        #[arg(long)]
        block: usize,
        #[arg(long, default_value = "ctxmap.pgm")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Polynomial degree of an L-layer scalar modulation chain.
    DegreeProbe {
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List shipped presets and isotropic pairs.
    Presets {
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// A gradient check that ran but did not pass.
#[derive(Debug)]
struct GradcheckFailed(String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return (4, "gradcheck");
    }
    match err.downcast_ref::<Error>() {
        Some(e @ Error::Numerical(_)) => (4, e.kind()),
        Some(e @ (Error::Precondition(_) | Error::Config(_) | Error::Parse { .. })) => (3, e.kind()),
        Some(e) => (1, e.kind()),
        None => (1, "io"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if std::env::var_os(harness::THREADS_ENV).is_some() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(harness::default_threads())
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn csv_writer(path: &Path) -> anyhow::Result<File> {
    File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

/// Preset name (hierarchical or isotropic) or path to a JSON spec.
fn load_model(target: &str, seed: u64) -> anyhow::Result<Model> {
    let opts = BuildOptions::seeded(seed);
    let path = Path::new(target);
    if target.ends_with(".json") || path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {target}"))?;
        let spec = ModelSpec::from_json(&text)?;
        return Ok(build_model(&spec, &opts)?);
    }
    Ok(Model::from_preset(target, &opts)?)
}

fn run(command: Command) -> anyhow::Result<()> {
    let out = &mut io::stdout().lock();
    match command {
        Command::Analyze { target, res, csv } => {
            let model = load_model(&target, DEFAULT_SEED)?;
            let report = analyze(&model, res)?;
            writeln!(out, "# analyze {target} res={res}")?;
            if let Arch::Hierarchical(spec) = &model.arch {
                if spec.stages.iter().any(|s| s.attn_blocks > 0) {
                    writeln!(out, "# attention mlp_ratio={} heads={}", spec.attention.mlp_ratio, spec.attention.heads)?;
                }
            }
            writeln!(out, "{report}")?;
            let exact = report.block_deltas.iter().filter(|d| d.matches()).count();
            writeln!(
                out,
                "closed form: {exact}/{} modulation blocks match 2(r+1)C^2+k^2C exactly",
                report.block_deltas.len()
            )?;
            writeln!(out, "stage params: {:?}", report.stage_params())?;
            if let Some(path) = csv {
                report.write_csv(csv_writer(&path)?)?;
            }
        }
        Command::Gradcheck { block, tol, csv } => {
            let kinds: Vec<BlockKind> = if block == "all" {
                BlockKind::ALL.to_vec()
            } else {
                vec![block.parse()?]
            };
            let mut reports: Vec<GradCheckReport> = Vec::new();
            for kind in kinds {
                for r in grad_check_shapes(kind, tol)? {
                    writeln!(out, "{r}")?;
                    reports.push(r);
                }
            }
            if let Some(path) = csv {
                let mut w = csv_writer(&path)?;
                writeln!(w, "block,shape,parameter,max_rel_err,count,pass")?;
                for r in &reports {
                    let shape = r.shape.map(|d| d.to_string()).join("x");
                    for c in &r.checks {
                        writeln!(w, "{},{shape},{},{:e},{},{}", r.label, c.name, c.max_rel_err, c.count, c.pass)?;
                    }
                }
            }
            let failed: Vec<String> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| {
                    let w = r.worst().expect("non-empty report");
                    format!("{} {:?} worst {} {:e}", r.label, r.shape, w.name, w.max_rel_err)
                })
                .collect();
            if !failed.is_empty() {
                return Err(GradcheckFailed(failed.join("; ")).into());
            }
            writeln!(out, "all {} checks passed at tol {tol:e}", reports.len())?;
        }
        Command::Bench {
            experiment,
            threads,
            iters,
            warmup,
            channels,
            ratio,
            size,
            pair,
            preset,
            res,
            seed,
            csv,
        } => {
            let protocol = Protocol {
                warmup,
                iters,
                threads: threads.unwrap_or_else(harness::default_threads),
            };
            writeln!(
                out,
                "# bench {experiment} warmup={warmup} iters={iters} threads={} seed={seed}",
                protocol.threads
            )?;
            let results: Vec<BenchResult> = match experiment.as_str() {
                "fusion" => {
                    let fb = bench_fusion_modes(channels, ratio, size, size, protocol, seed)?;
                    writeln!(out, "outputs bit-identical across modes")?;
                    writeln!(out, "repeat/reshape latency ratio {:.4}", fb.ratio())?;
                    vec![fb.repeat, fb.reshape]
                }
                "pair" => {
                    let (name, a, b) = isotropic_pairs()
                        .into_iter()
                        .find(|(n, _, _)| *n == pair)
                        .ok_or_else(|| Error::Config(format!("unknown pair '{pair}'")))?;
                    let pb = bench_pair_mbconv(name, &a, &b, res, protocol)?;
                    writeln!(
                        out,
                        "params effmod {} mbconv {} (delta {:.2}%)",
                        pb.params_mod,
                        pb.params_mbconv,
                        pb.param_delta() * 100.0
                    )?;
                    writeln!(out, "effmod/mbconv latency ratio {:.4}", pb.efficient_mod.mean_ms / pb.mbconv.mean_ms)?;
                    vec![pb.efficient_mod, pb.mbconv]
                }
                "model" => {
                    let model = load_model(&preset, seed)?;
                    let x = Tensor::full([1, 3, res, res], 0.5);
                    model.logits(&x)?.check_finite("logits")?;
                    let shape = format!("1x3x{res}x{res}");
                    vec![bench("model", &preset, &shape, protocol, || model.logits(&x).expect("probed"))?]
                }
                other => bail!(Error::Config(format!(
                    "unknown experiment '{other}', expected fusion, pair or model"
                ))),
            };
            writeln!(out, "experiment,mode,shape,mean_ms,std_ms,p50_ms,p90_ms,cv,unstable")?;
            for r in &results {
                writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.3},{}",
                    r.experiment, r.mode, r.shape, r.mean_ms, r.std_ms, r.p50_ms, r.p90_ms, r.cv, r.unstable
                )?;
            }
            if let Some(path) = csv {
                harness::write_csv(&results, csv_writer(&path)?)?;
            }
        }
        Command::Train {
            preset,
            seed,
            epochs,
            lr,
            csv,
            save,
        } => {
            let mut spec = build_preset(&preset)?;
            spec.head.classes = 4;
            let mut model = build_model(&spec, &BuildOptions::seeded(seed))?;
            let task = TaskConfig::default();
            let (train_set, eval_set) = task_datasets(&task, 4)?;
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs,
                seed,
                lr: lr.unwrap_or(defaults.lr),
                ..defaults
            };
            writeln!(
                out,
                "# train preset={preset} seed={seed} epochs={epochs} lr={} batch={} wd={} data_seed={}",
                cfg.lr, cfg.batch_size, cfg.weight_decay, task.data_seed
            )?;
            let history = trainer::train(&mut model, &train_set, &eval_set, &cfg)?;
            writeln!(out, "epoch,lr,train_loss,train_acc,eval_acc")?;
            for e in &history.epochs {
                writeln!(out, "{},{:.6e},{:.6},{:.4},{:.4}", e.epoch, e.lr, e.train_loss, e.train_acc, e.eval_acc)?;
            }
            writeln!(
                out,
                "initial_loss {:.6} final_loss {:.6} final_eval_acc {:.4}",
                history.initial_loss,
                history.final_loss,
                history.final_eval_acc()
            )?;
            if let Some(path) = csv {
                history.write_csv(csv_writer(&path)?, &preset)?;
            }
            if let Some(path) = save {
                trainer::save_params(&model.params, &path)?;
            }
        }
        Command::AblateFusion { seed, epochs, csv } => {
            let cfg = TrainConfig {
                epochs,
                ..TrainConfig::default()
            };
            writeln!(out, "# ablate-fusion preset=micro seed={seed} epochs={epochs}")?;
            let ab = ablate_fusion(seed, &TaskConfig::default(), &cfg)?;
            writeln!(out, "parameters per variant: {}", ab.params)?;
            writeln!(out, "variant,epoch,train_loss,eval_acc")?;
            for (name, h) in [("mul", &ab.mul), ("sum", &ab.sum)] {
                for e in &h.epochs {
                    writeln!(out, "{name},{},{:.6},{:.4}", e.epoch, e.train_loss, e.eval_acc)?;
                }
            }
            writeln!(
                out,
                "final eval acc: mul {:.4} sum {:.4} (reported, not asserted)",
                ab.mul.final_eval_acc(),
                ab.sum.final_eval_acc()
            )?;
            if let Some(path) = csv {
                write_histories(&[("mul", &ab.mul), ("sum", &ab.sum)], csv_writer(&path)?)?;
            }
        }
        Command::Ctxmap {
            preset,
            image,
            stage,
            block,
            out: path,
            seed,
            csv,
        } => {
            let model = load_model(&preset, seed)?;
            let img = Image::load(&image)?;
            let map = context_map(&model, &img.to_tensor(), stage, block)?;
            map.to_image().save(&path)?;
            writeln!(
                out,
                "# ctxmap {preset} stage={stage} block={block} seed={seed}\n{}x{} map written to {}",
                map.height,
                map.width,
                path.display()
            )?;
            if let Some(p) = csv {
                let mut w = csv_writer(&p)?;
                for row in map.values.chunks(map.width) {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{}", line.join(","))?;
                }
            }
        }
        Command::DegreeProbe { layers, seed, csv } => {
            let degree = degree_probe(layers, seed)?;
            writeln!(out, "# degree-probe layers={layers} seed={seed}")?;
            writeln!(out, "{degree}")?;
            if let Some(path) = csv {
                let mut w = csv_writer(&path)?;
                writeln!(w, "layers,degree")?;
                writeln!(w, "{layers},{degree}")?;
            }
        }
        Command::Presets { csv } => {
            let mut rows = Vec::new();
            for name in PRESETS {
                let spec = build_preset(name)?;
                let dims: Vec<String> = spec.stages.iter().map(|s| s.dim.to_string()).collect();
                let blocks: Vec<String> = spec
                    .stages
                    .iter()
                    .map(|s| format!("[{},{}]", s.mod_blocks, s.attn_blocks))
                    .collect();
                rows.push((name.to_string(), "hierarchical", format!("dims {} blocks {}", dims.join("/"), blocks.join(""))));
            }
            for name in isotropic_preset_names() {
                let s = isotropic_preset(&name)?;
                rows.push((name, "isotropic", format!("dim {} depth {} r {} k {}", s.dim, s.depth, s.r, s.kernel)));
            }
            for (name, kind, desc) in &rows {
                writeln!(out, "{name:<20} {kind:<13} {desc}")?;
            }
            if let Some(path) = csv {
                let mut w = csv_writer(&path)?;
                writeln!(w, "name,kind,description")?;
                for (name, kind, desc) in &rows {
                    writeln!(w, "{name},{kind},{desc}")?;
                }
            }
        }
    }
    Ok(())
}
