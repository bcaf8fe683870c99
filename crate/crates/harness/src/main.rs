use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use postprune::allocation::{allocate, allocate_custom, apply_plan, AllocOptions, Strategy};
use postprune::graph::Granularity;
use postprune::io::{load_calibration, load_masks, load_model, save_masks, save_model};
use postprune::reconstruction::{run_reconstruction, CalibrationSet, InputMode, ReconConfig};
use postprune::rng::sub_seed;
use postprune::ModelGraph;
use postprune_harness::data::{gen_dataset, load_dataset, save_dataset, DataSpec, Task};
use postprune_harness::evaluate::evaluate;
use postprune_harness::fixtures::FixtureSpec;
use postprune_harness::report::{self, Meta, Track};
use postprune_harness::sweep::{
    dataset_name, load_tables, run_sweep, ReconSetting, Scale, SweepConfig,
};
use postprune_harness::train::{train, TrainConfig};
use postprune_harness::{config, HarnessError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "postprune",
    version,
    about = "Post-training sparsity benchmark driver"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed for every derived random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// key=value file mirroring the flags; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use 1024 calibration samples, batch 64 and 20000 iterations.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Args, Debug, Default)]
struct ReconFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Number of calibration samples drawn from the training split.
    #[arg(long)]
    calib_size: Option<usize>,
}

impl ReconFlags {
    fn scale(&self, paper: bool) -> Scale {
        let base = if paper { Scale::paper() } else { Scale::desk() };
        Scale {
            calibration: self.calib_size.unwrap_or(base.calibration),
            batch_size: self.batch.unwrap_or(base.batch_size),
            iterations: self.iters.unwrap_or(base.iterations),
            lr: self.lr.unwrap_or(base.lr),
            momentum: self.momentum.unwrap_or(base.momentum),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into <out>/data.
    #[command(args_override_self = true)]
    GenData {
        #[arg(long, default_value = "cls")]
        task: Task,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a fixture and store it in <out>/fixtures.
    #[command(args_override_self = true)]
    Train {
        /// Fixture name, e.g. rescnn-m-cls.
        #[arg(long)]
        fixture: FixtureSpec,
        /// Dataset file (generated under <out>/data when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
    },
    /// Allocate sparsity and write <out>/sparse.ptsm and <out>/masks.ptsk.
    #[command(args_override_self = true)]
    Sparsify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value = "magnitude")]
        allocator: Strategy,
        #[arg(long)]
        keep_last_dense: bool,
        /// Per-layer rates for the custom allocator.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Reconstruct a sparse model and write <out>/reconstructed.ptsm.
    #[command(args_override_self = true)]
    Reconstruct {
        /// Dense model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Calibration file; otherwise samples are drawn from --data.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "block")]
        granularity: Granularity,
        #[arg(long, default_value = "sparse")]
        input: InputMode,
        #[arg(long)]
        error_correction: bool,
        #[command(flatten)]
        recon: ReconFlags,
    },
    /// Score a model on a dataset's test split.
    #[command(args_override_self = true)]
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run (or resume) a benchmark sweep under <out>.
    #[command(args_override_self = true)]
    Sweep {
        /// Comma-separated fixture names, or `all`.
        #[arg(long, default_value = "all")]
        fixtures: String,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "uniform,magnitude,erk")]
        allocators: Vec<Strategy>,
        /// Reconstruction settings as <granularity>-<input>-<ec|noec>, or `none`.
        #[arg(long, default_value = "track")]
        recon: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        keep_last_dense: bool,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        recon_flags: ReconFlags,
    },
    /// Render track reports from <out>/scores.
    #[command(args_override_self = true)]
    Report {
        /// alloc, recon, arch, robust, task or all.
        #[arg(long, default_value = "all")]
        track: String,
    },
}

const SUBCOMMANDS: [&str; 7] = [
    "gen-data",
    "train",
    "sparsify",
    "reconstruct",
    "evaluate",
    "sweep",
    "report",
];

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    Ok(dir.join(name))
}

fn load(path: &Path) -> Result<ModelGraph> {
    Ok(load_model(path)?)
}

fn parse_fixtures(s: &str) -> Result<Vec<FixtureSpec>> {
    if s == "all" {
        return Ok(FixtureSpec::zoo());
    }
    s.split(',')
        .map(|f| f.trim().parse().map_err(HarnessError::Usage))
        .collect()
}

fn parse_recon(s: &str) -> Result<Vec<ReconSetting>> {
    match s {
        "track" => Ok(ReconSetting::track_variants()),
        "none" => Ok(Vec::new()),
        _ => s
            .split(',')
            .map(|r| r.trim().parse().map_err(HarnessError::Usage))
            .collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let Common {
        seed,
        out,
        paper_scale,
        ..
    } = cli.common;
    match cli.command {
        Command::GenData {
            task,
            classes,
            train,
            test,
            noise,
        } => {
            let base = DataSpec::default_for(task);
            let spec = DataSpec {
                classes: classes.unwrap_or(base.classes),
                train: train.unwrap_or(base.train),
                test: test.unwrap_or(base.test),
                noise: noise.unwrap_or(base.noise),
                ..base
            };
            let d = gen_dataset(&spec, sub_seed(seed, &format!("dataset/{task}")))?;
            let path = out_file(&out.join("data"), &format!("{}.ptsd", dataset_name(task)))?;
            save_dataset(&d, &path)?;
            println!("{}", path.display());
        }
        Command::Train {
            fixture,
            data,
            epochs,
        } => {
            let d = match data {
                Some(p) => load_dataset(p)?,
                None => postprune_harness::sweep::prepare_dataset(&out, fixture.task, seed)?,
            };
            if d.spec.task != fixture.task {
                return Err(HarnessError::Usage(format!(
                    "{fixture} needs a {} dataset",
                    fixture.task
                )));
            }
            let mut model = fixture.build(&d.spec, sub_seed(seed, &format!("init/{fixture}")))?;
            let cfg = TrainConfig {
                epochs,
                seed: sub_seed(seed, &format!("training/{fixture}")),
                ..TrainConfig::default()
            };
            let loss = train(&mut model, &d, &cfg)?;
            let path = out_file(&out.join("fixtures"), &format!("{fixture}.ptsm"))?;
            save_model(&model, &path)?;
            let score = evaluate(&load(&path)?, &d.test, fixture.task)?;
            println!(
                "{}\tloss {loss:.6}\t{} {:.4}",
                path.display(),
                score.orientation,
                score.value
            );
        }
        Command::Sparsify {
            model,
            rate,
            allocator,
            keep_last_dense,
            plan,
        } => {
            let dense = load(&model)?;
            let p = match (allocator, plan) {
                (Strategy::Custom, Some(file)) => {
                    let text =
                        std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
                    allocate_custom(&dense, rate, &text)?
                }
                (Strategy::Custom, None) => {
                    return Err(HarnessError::Usage(
                        "--allocator custom needs --plan".into(),
                    ))
                }
                (_, Some(_)) => {
                    return Err(HarnessError::Usage(
                        "--plan is only used with --allocator custom".into(),
                    ))
                }
                (s, None) => allocate(&dense, s, rate, AllocOptions { keep_last_dense })?,
            };
            let (mask, sparse) = apply_plan(&dense, &p)?;
            save_model(&sparse, out_file(&out, "sparse.ptsm")?)?;
            save_masks(&mask, out_file(&out, "masks.ptsk")?)?;
            std::fs::write(out.join("plan.txt"), p.to_plan_file())
                .map_err(|e| HarnessError::io(out.join("plan.txt"), e))?;
            for (id, _) in mask.iter() {
                println!("{id}\t{:.4}", mask.layer_sparsity(id).unwrap_or(0.0));
            }
            println!("global\t{:.4}", mask.global_sparsity());
        }
        Command::Reconstruct {
            model,
            sparse,
            masks,
            calib,
            data,
            granularity,
            input,
            error_correction,
            recon,
        } => {
            let dense = load(&model)?;
            let sparse_g = load(&sparse)?;
            let mask = load_masks(&masks)?;
            let scale = recon.scale(paper_scale);
            let calib = match (calib, data) {
                (Some(c), _) => CalibrationSet::new(load_calibration(c)?)?,
                (None, Some(d)) => {
                    let d = load_dataset(d)?;
                    CalibrationSet::sample(
                        &d.train.inputs,
                        scale.calibration,
                        sub_seed(seed, "calibration"),
                    )?
                }
                (None, None) => {
                    return Err(HarnessError::Usage(
                        "reconstruct needs --calib or --data".into(),
                    ))
                }
            };
            let cfg = ReconConfig {
                granularity,
                input_mode: input,
                error_correction,
                lr: scale.lr,
                momentum: scale.momentum,
                iterations: scale.iterations,
                batch_size: scale.batch_size,
                seed: sub_seed(seed, "shuffle"),
                ..ReconConfig::default()
            };
            let outcome = run_reconstruction(&dense, &sparse_g, &mask, &calib, &cfg)?;
            for u in &outcome.units {
                let note = u
                    .aborted
                    .as_deref()
                    .map(|a| format!("\taborted: {a}"))
                    .unwrap_or_default();
                println!(
                    "{}\t{:.6e} -> {:.6e}{note}",
                    u.output, u.initial_mse, u.final_mse
                );
            }
            let path = out_file(&out, "reconstructed.ptsm")?;
            save_model(&outcome.graph, &path)?;
            println!("{}", path.display());
        }
        Command::Evaluate { model, data } => {
            let d = load_dataset(data)?;
            let s = evaluate(&load(&model)?, &d.test, d.spec.task)?;
            println!("{} {:.4}", s.orientation, s.value);
        }
        Command::Sweep {
            fixtures,
            rates,
            allocators,
            recon,
            seeds,
            keep_last_dense,
            epochs,
            threads,
            recon_flags,
        } => {
            let cfg = SweepConfig {
                fixtures: parse_fixtures(&fixtures)?,
                rates,
                allocators,
                recon: parse_recon(&recon)?,
                keep_last_dense,
                seeds,
                root_seed: seed,
                scale: recon_flags.scale(paper_scale),
                epochs,
                threads,
                out_dir: out.clone(),
            };
            let o = run_sweep(&cfg)?;
            println!(
                "{} cells computed, {} reused, {} failed",
                o.computed,
                o.reused,
                o.errors.len()
            );
            for (id, e) in &o.errors {
                eprintln!("failed: {id}: {e}");
            }
        }
        Command::Report { track } => {
            let tracks: Vec<Track> = if track == "all" {
                Track::ALL.to_vec()
            } else {
                vec![track.parse().map_err(HarnessError::Usage)?]
            };
            let tables = load_tables(&out)?;
            let meta = Meta::new(None);
            for t in tracks {
                let r = report::build(&tables, t, &meta)?;
                report::write(&r, &out.join("reports"))?;
                print!("{}", r.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::expand(std::env::args().collect(), &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
