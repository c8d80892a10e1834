use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mrbcnn::bench::{default_suite, report_csv, run_bench};
use mrbcnn::checkpoint::{warm_start, Checkpoint, TrainState};
use mrbcnn::config::load_config;
use mrbcnn::data::{load_manifest, synth_dataset, ImageSet, PixelNorm, SynthConfig};
use mrbcnn::eval::{evaluate_trials, protocol_trials, write_metrics, Protocol};
use mrbcnn::gradcheck::{gradient_suite, DEFAULT_TOL};
use mrbcnn::train::{embed_set, init_stream, Trainer};
use mrbcnn::{Model, RngStream};

#[derive(Parser)]
#[command(
    name = "mrbcnn",
    version,
    about = "Multi-region bilinear CNN embeddings for person re-identification"
)]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint (or fine-tune with --allow-head-reinit).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load only tensors whose shapes match; reinitialize the rest and
        /// restart the schedule.
        #[arg(long)]
        allow_head_reinit: bool,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// cuhk03, market or generic.
        #[arg(long, default_value = "cuhk03")]
        protocol: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Metrics directory (default: <checkpoint dir>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer, loss and parameter tensor.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 16)]
        coords: usize,
    },
    /// Write a synthetic identity dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Time the hot kernels after checking them against direct loops.
    Bench {
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            resume,
            allow_head_reinit,
        } => cmd_train(&config, resume.as_deref(), allow_head_reinit),
        Command::Eval {
            checkpoint,
            manifest,
            protocol,
            seed,
            trials,
            out,
        } => cmd_eval(&checkpoint, &manifest, &protocol, seed, trials, out),
        Command::Gradcheck { seed, coords } => cmd_gradcheck(seed, coords),
        Command::Synth {
            out,
            ids,
            per_id,
            seed,
            noise,
        } => {
            let cfg = SynthConfig::new(ids, per_id, noise);
            let rep = synth_dataset(&out, &cfg, RngStream::new(seed))?;
            println!(
                "wrote {} images to {}; mean RMS distance within identity {:.4}, between identities {:.4}",
                rep.manifest.len(),
                rep.manifest_path.display(),
                rep.within_distance,
                rep.between_distance
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { reps, warmup, out } => {
            let results = run_bench(&default_suite(), reps, warmup, 0)?;
            let csv = report_csv(&results);
            print!("{csv}");
            for r in &results {
                match &r.error {
                    None => println!(
                        "# {} {}: {} multiplies, max |Δ| vs reference {:e}",
                        r.kernel, r.shape, r.multiplies, r.max_abs_diff
                    ),
                    Some(e) => println!("# {} {}: FAILED gate: {e}", r.kernel, r.shape),
                }
            }
            if let Some(path) = out {
                fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(if results.iter().all(|r| r.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, allow_head_reinit: bool) -> Result<ExitCode> {
    let config = load_config(config_path)?;
    let (params, state) = match resume {
        None => {
            if allow_head_reinit {
                bail!("--allow-head-reinit needs --resume");
            }
            let params = mrbcnn::nn::init_params(&config.net, init_stream(config.seed))?;
            (params, TrainState::fresh(&config))
        }
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let ws = warm_start(&ck, &config.net, allow_head_reinit, init_stream(config.seed))?;
            if allow_head_reinit {
                info!(
                    "fine-tuning: loaded {} tensors, reinitialized {:?}",
                    ws.loaded.len(),
                    ws.reinitialized
                );
                let mut params = ws.params;
                params.reset_momentum()?;
                (params, TrainState::fresh(&config))
            } else {
                info!("resuming at iteration {}", ck.state.iteration);
                (ws.params, ck.state)
            }
        }
    };
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    fs::write(config.out_dir.join("config.txt"), config.to_text())?;
    let out_dir = config.out_dir.clone();
    let mut trainer = Trainer::resume(config, params, state)?;
    let report = trainer.run(&out_dir)?;
    match report.best {
        Some(b) => println!(
            "done: {} iterations; best validation recall@1 {:.4} at iteration {}",
            report.iterations, b.recall1, b.iteration
        ),
        None => println!("done: {} iterations", report.iterations),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    protocol: &str,
    seed: u64,
    n_trials: usize,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let protocol: Protocol = protocol.parse()?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = Model::new(ck.config.net.clone(), ck.params)?;
    let manifest = load_manifest(manifest)?;
    let trials = protocol_trials(&manifest, protocol, n_trials, seed)?;
    let set = ImageSet::new(
        manifest,
        model.config.input_h,
        model.config.input_w,
        PixelNorm::default(),
    );
    let embeddings = embed_set(&model, &set)?;
    let summary = evaluate_trials(set.manifest(), &embeddings, &trials, protocol, seed)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    write_metrics(&out, &summary)?;
    println!(
        "{} trials: recall@1 {:.4} (std {:.4}), @5 {:.4}, @10 {:.4}, @20 {:.4}, mAP {:.4}; metrics in {}",
        summary.trials.len(),
        summary.mean_recall_at(1),
        summary.recall1_std(),
        summary.mean_recall_at(5),
        summary.mean_recall_at(10),
        summary.mean_recall_at(20),
        summary.mean_map(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, coords: usize) -> Result<ExitCode> {
    let reports = gradient_suite(seed, coords)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed(DEFAULT_TOL) { "ok" } else { "FAIL" };
        if !r.passed(DEFAULT_TOL) {
            failed += 1;
        }
        println!(
            "{verdict:4} {:<44} max_rel_err {:.3e} ({} coords)",
            r.name, r.max_rel_err, r.checked
        );
    }
    println!(
        "{} checks, {} failed (tolerance {:e})",
        reports.len(),
        failed,
        DEFAULT_TOL
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
