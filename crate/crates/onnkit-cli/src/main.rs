//! Command-line driver for the hybrid-ONN pipeline.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use clap::{Args, Parser, Subcommand};
use onnkit::config::RunConfig;
use onnkit::error::Error;
use onnkit::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "onnkit",
    about = "Design, estimate, train, fabricate, and compensate hybrid optical neural networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a single key (repeatable): --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (overrides out_dir).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Global seed (overrides seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 implies deterministic execution.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force deterministic single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the metasurface kernel layout.
    Design,
    /// Estimate achievable accuracy with kernel regression before training.
    Estimate,
    /// Train the digital teacher.
    PretrainTeacher,
    /// Train the hybrid student (e2e, kd, or ntkd).
    Train,
    /// Freeze fabrication noise into the trained frontend.
    Fabricate,
    /// Estimate gain and shift of the fabricated system.
    Calibrate,
    /// Retrain the digital backend against the fabricated frontend.
    Compensate,
    /// Random-kernel frontend ablation.
    AblateRandom,
    /// Offline analyses.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval,
    /// Export penultimate-layer features as CSV.
    ExportFeatures,
    /// Run every stage in order.
    Pipeline,
    /// List all configuration keys.
    ConfigKeys,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Cumulative eigenvalue power of the teacher's conv-parameter Gram.
    Spectrum,
    /// Kernel perturbation scaling versus width.
    NtkScaling,
    /// MAC counts and the capture/compute energy model.
    Macs,
}

fn build_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
        if threads == 1 {
            cfg.deterministic = true;
        }
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn run(command: &Command, cfg: &RunConfig) -> Result<(), Error> {
    pipeline::apply_threads(cfg);
    match command {
        Command::Design => {
            let layout = pipeline::stage_design(cfg)?;
            println!(
                "layout: {} kernels ({} cols x {} rows)",
                layout.n_kernels, layout.n_cols, layout.n_rows
            );
            for (i, (x, y)) in layout.centers_mm.iter().enumerate() {
                println!("  kernel {i}: center ({x:.3} mm, {y:.3} mm)");
            }
        }
        Command::Estimate => {
            let report = pipeline::stage_estimate(cfg)?;
            println!(
                "estimate: lambda* {:.6e}, val {:.4}, test {:.4}",
                report.lambda_star, report.val_metric, report.test_metric
            );
        }
        Command::PretrainTeacher => {
            let metric = pipeline::stage_pretrain_teacher(cfg)?;
            println!("teacher: test metric {metric:.4}");
        }
        Command::Train => {
            let metric = pipeline::stage_train(cfg)?;
            println!("student ({}): test metric {metric:.4}", cfg.strategy);
        }
        Command::Fabricate => {
            let path = pipeline::stage_fabricate(cfg)?;
            println!("fabricated frontend written to {}", path.display());
        }
        Command::Calibrate => {
            let cal = pipeline::stage_calibrate(cfg)?;
            println!(
                "calibration: gain {:.4}, shift ({}, {}), score {:.4}",
                cal.gain, cal.shift_x, cal.shift_y, cal.score
            );
        }
        Command::Compensate => {
            let metric = pipeline::stage_compensate(cfg)?;
            println!(
                "compensated ({}): test metric {metric:.4}",
                cfg.compensate_strategy
            );
        }
        Command::AblateRandom => {
            let rows = pipeline::stage_ablate(cfg)?;
            for (k, acc) in rows {
                println!("{k} kernels: {acc:.4}");
            }
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::Spectrum => {
                let report = pipeline::stage_analyze_spectrum(cfg)?;
                for (t, c) in &report.counts_at {
                    println!("count_at({t}) = {c}");
                }
            }
            AnalyzeCommand::NtkScaling => {
                let report = pipeline::stage_analyze_ntk_scaling(cfg)?;
                for w in &report.per_width {
                    println!(
                        "m = {:5}: mean |dTheta| = {:.6e} (std {:.2e})",
                        w.width, w.mean_delta_theta, w.std_delta_theta
                    );
                }
                println!("log-log slope: {:.4}", report.slope);
            }
            AnalyzeCommand::Macs => {
                let (full, backend, energy) = pipeline::stage_analyze_macs(cfg)?;
                println!("full: {full} MACs, backend only: {backend} MACs");
                println!("hybrid energy per inference: {energy:.4e} J");
            }
        },
        Command::Eval => {
            let metric = pipeline::stage_eval(cfg)?;
            println!("eval: test metric {metric:.4}");
        }
        Command::ExportFeatures => {
            let rows = pipeline::stage_export_features(cfg)?;
            println!("exported {rows} feature rows");
        }
        Command::Pipeline => {
            let log = pipeline::run_pipeline(cfg)?;
            for (stage, summary) in log {
                println!("[{stage}] {summary}");
            }
        }
        Command::ConfigKeys => {
            for (key, doc) in RunConfig::KEYS {
                println!("{key:24} {doc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep help/version on stdout with success; usage errors exit 1.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let cfg = match build_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
