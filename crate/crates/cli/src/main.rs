//! `agglo`: train, evaluate, benchmark and plot distillation runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 non-finite value during training, 4 checkpoint or hash mismatch.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agglo_core::bench::{bench_csv, BenchConfig};
use agglo_core::eval::evaluate_checkpoint;
use agglo_core::trainer::{read_metrics, run_training};
use agglo_core::{Error, Result, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agglo", version, about = "Multi-teacher feature distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student; writes config, partition, metrics and checkpoints to the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `dotted.path=value` override, JSON-typed; repeatable.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Report path; defaults to the checkpoint path with `.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes of the models in a bench config and write bench.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Worker threads for the numerics.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Plot the loss columns of a metrics CSV as a log-scale SVG.
    Plot { metrics_csv: PathBuf, out_svg: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::load(path)?.apply_overrides(overrides)?.with_seed_env()
}

fn train(config: &Path, overrides: &[String], resume: Option<&Path>, out: Option<PathBuf>) -> Result<String> {
    let cfg = load_config(config, overrides)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let s = run_training(cfg, &dir, resume, None)?;
    Ok(format!(
        "trained {} steps, loss {} -> {}, checkpoint {}",
        s.steps_done,
        s.first_loss.map_or("-".into(), |v| format!("{v:.6}")),
        s.last_loss.map_or("-".into(), |v| format!("{v:.6}")),
        s.checkpoint.display()
    ))
}

fn eval(checkpoint: &Path, config: &Path, overrides: &[String], out: Option<PathBuf>) -> Result<String> {
    let cfg = load_config(config, overrides)?;
    let report = evaluate_checkpoint(&cfg, checkpoint)?;
    let path = out.unwrap_or_else(|| checkpoint.with_extension("eval.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let opt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
    Ok(format!(
        "knn_top1={:.4} zero_shot_top1={} linear_probe_miou={:.4} report={}",
        report.knn_top1,
        opt(report.zero_shot_top1),
        report.linear_probe_miou,
        path.display()
    ))
}

fn bench(config: &Path, out: &Path, threads: usize) -> Result<String> {
    let cfg = BenchConfig::load(config)?;
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reports = pool.install(|| cfg.run())?;
    fs::write(out, bench_csv(&reports))?;
    Ok(format!("benchmarked {} models, wrote {}", reports.len(), out.display()))
}

fn plot_cmd(csv: &Path, svg: &Path) -> Result<String> {
    let (header, rows) = read_metrics(csv).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", csv.display())),
        other => other,
    })?;
    let doc = plot::render_svg(&header, &rows).map_err(|e| Error::Config(format!("{}: {e}", csv.display())))?;
    fs::write(svg, doc)?;
    Ok(format!("plotted {} columns over {} steps to {}", plot::loss_columns(&header).len(), rows.len(), svg.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides, resume, out } => train(&config, &overrides, resume.as_deref(), out),
        Command::Eval { checkpoint, config, overrides, out } => eval(&checkpoint, &config, &overrides, out),
        Command::Bench { config, out, threads } => bench(&config, &out, threads),
        Command::Plot { metrics_csv, out_svg } => plot_cmd(&metrics_csv, &out_svg),
    };
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
