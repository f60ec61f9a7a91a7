use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use relidar::config::PipelineConfig;
use relidar::pipeline;
use relidar::scene_gen::{write_demo_dataset, SceneSpec};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "relidar",
    about = "Reconstructs a driving scene from vehicle-side LiDAR and re-renders labeled point clouds from new sensor poses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Stage directory; overrides the config's output root.
    #[arg(long)]
    stage_dir: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the machine-readable JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration helpers.
    Config {
        /// Print the built-in defaults as TOML and exit.
        #[arg(long)]
        dump_defaults: bool,
    },
    /// Split scans into per-vehicle clouds and a clean background.
    Decompose(StageArgs),
    /// Fit the background field from assigned scan rays.
    FitBackground(StageArgs),
    /// Fit one canonical field per reconstructable vehicle.
    FitVehicles(StageArgs),
    /// Build and dilate the observed-space occupancy grid.
    Occupancy(StageArgs),
    /// Render the configured sensors over the scene timeline.
    Render(StageArgs),
    /// Run every stage in order, resuming completed ones.
    Pipeline(StageArgs),
    /// Compare two rendered frame directories.
    Eval {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a small synthetic dataset (ground plane plus two cars).
    GenDemo {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
    },
}

fn load_stage_config(args: &StageArgs) -> Result<(PipelineConfig, PathBuf)> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let output_root = args
        .stage_dir
        .clone()
        .unwrap_or_else(|| config.output.root.clone());
    Ok((config, output_root))
}

fn emit_report<T: serde::Serialize>(report: &T, path: &Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_single_stage(stage: &str, args: &StageArgs) -> Result<()> {
    let (config, output_root) = load_stage_config(args)?;
    let _lock = pipeline::StageLock::acquire(&output_root)?;
    pipeline::run_stage(stage, &config, &output_root)
        .with_context(|| format!("stage {stage}"))?;
    log::info!("stage {stage} finished");
    Ok(())
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Config { dump_defaults } => {
            if dump_defaults {
                print!("{}", PipelineConfig::dump_defaults());
            }
            Ok(true)
        }
        Command::Decompose(args) => run_single_stage("decompose", &args).map(|_| true),
        Command::FitBackground(args) => run_single_stage("fit-background", &args).map(|_| true),
        Command::FitVehicles(args) => run_single_stage("fit-vehicles", &args).map(|_| true),
        Command::Occupancy(args) => run_single_stage("occupancy", &args).map(|_| true),
        Command::Render(args) => run_single_stage("render", &args).map(|_| true),
        Command::Pipeline(args) => {
            let (config, output_root) = load_stage_config(&args)?;
            let report = pipeline::run_pipeline(&config, &output_root)?;
            let ok = report.status == "ok";
            emit_report(&report, &args.report)?;
            if let Some(failure) = &report.failure {
                log::error!("{failure}");
            }
            Ok(ok)
        }
        Command::Eval {
            rendered,
            reference,
            report,
        } => {
            let results = pipeline::evaluate_directories(&rendered, &reference)?;
            emit_report(&results, &report)?;
            Ok(true)
        }
        Command::GenDemo { out, frames } => {
            let spec = SceneSpec {
                n_frames: frames,
                ..SceneSpec::default()
            };
            write_demo_dataset(&out, &spec)?;
            log::info!("wrote demo dataset to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
