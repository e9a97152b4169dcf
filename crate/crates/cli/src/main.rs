//! `fisheye`: synthesize fisheye datasets, rectify or distort images with
//! known parameters, estimate parameters from a pair, check gradients and
//! score rectifications.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "FISHEYE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fisheye", version, about = "Fisheye distortion synthesis, rectification and parameter estimation")]
struct Cli {
    /// JSON config file with one optional section per subcommand; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only log errors
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate fisheye samples with random parameters from a directory of images
    Synthesize(commands::SynthesizeOpts),
    /// Rectify a fisheye image (and optional label map) with known parameters
    Rectify(commands::RectifyOpts),
    /// Distort a perspective image (and optional label map) with known parameters
    Distort(commands::DistortOpts),
    /// Recover parameters from a fisheye / ground-truth pair
    Estimate(commands::EstimateOpts),
    /// Compare analytic parameter gradients with finite differences
    Gradcheck(commands::GradcheckOpts),
    /// Score rectified images against a manifest's ground truth
    Evaluate(commands::EvaluateOpts),
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    init_threads()?;
    let cfg = cli.config.as_deref().map(config::load).transpose()?;
    let cfg = cfg.as_ref();
    match &cli.command {
        Command::Synthesize(o) => commands::synthesize(&config::resolve(o, cfg, "synthesize")?),
        Command::Rectify(o) => commands::rectify(&config::resolve(o, cfg, "rectify")?),
        Command::Distort(o) => commands::distort(&config::resolve(o, cfg, "distort")?),
        Command::Estimate(o) => commands::estimate(&config::resolve(o, cfg, "estimate")?),
        Command::Gradcheck(o) => commands::gradcheck(&config::resolve(o, cfg, "gradcheck")?),
        Command::Evaluate(o) => commands::evaluate(&config::resolve(o, cfg, "evaluate")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
