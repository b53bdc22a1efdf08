//! `samhead`: synthesize data, train, detect, evaluate, sweep and plot.

mod commands;
mod config;
mod failure;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;
use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "samhead", version, about = "Scale-aware pedestrian detection head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration with sections seed, synth, detector, protocol, eval, sweep, plot
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (created when missing)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed; overrides the config's seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads, 0 picks one per core
    #[arg(long, global = true, value_name = "N", env = "SAMHEAD_THREADS", default_value_t = 0)]
    threads: usize,
    /// Progress on stderr; repeat for more
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out
    Synth,
    /// Train a detector; writes model.json and manifest.json
    Train {
        /// Dataset directory
        dataset: PathBuf,
    },
    /// Run a model over a dataset; writes detections.csv
    Detect {
        /// Model file written by train
        model: PathBuf,
        /// Dataset directory
        dataset: PathBuf,
    },
    /// Score detections; writes metrics.json, miss_rate.csv and pr.csv
    Eval {
        /// Detections CSV (image_id,x,y,w,h,score)
        detections: PathBuf,
        /// Annotations JSONL or a dataset directory
        annotations: PathBuf,
    },
    /// Train and score every layer combination on every subset; writes sweep.csv
    Sweep {
        /// Training dataset directory
        train: PathBuf,
        /// Test dataset directory
        test: PathBuf,
    },
    /// Draw curve CSVs into plot.svg
    Plot {
        /// Curve CSVs of one kind
        #[arg(required = true)]
        curves: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    if g.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(g.threads).build_global().map_err(|e| Failure::usage(e.to_string()))?;
    }
    if let Some(c) = &g.config {
        commands::require(c)?;
    }
    let config = RunConfig::load(g.config.as_deref())?;
    let out = g.out.ok_or_else(|| Failure::usage("--out is required"))?;
    let seed = g.seed.or(config.seed).unwrap_or(0);
    let ctx = Ctx { config, out, seed, verbose: g.verbose };
    match &cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train { dataset } => commands::train(&ctx, dataset),
        Command::Detect { model, dataset } => commands::detect(&ctx, model, dataset),
        Command::Eval { detections, annotations } => commands::eval(&ctx, detections, annotations),
        Command::Sweep { train, test } => commands::sweep(&ctx, train, test),
        Command::Plot { curves } => commands::plot(&ctx, curves),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", Failure::usage(e.kind().to_string()).line());
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.kind.code() as u8)
        }
    }
}
