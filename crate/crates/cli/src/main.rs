//! `tancount`: dataset synthesis, ground-truth generation, training,
//! inference, evaluation and benchmarking for video crowd counting.

mod config;
mod density;
mod infer;
mod report;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::Globals;

#[derive(Debug, Parser)]
#[command(name = "tancount", version, about = "Video crowd counting with temporal fusion")]
struct Cli {
    /// JSON file of settings; flags override it, it overrides the defaults.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-frame and intra-op parallelism.
    #[arg(long, global = true, env = "TANCOUNT_THREADS")]
    threads: Option<usize>,
    /// Leave timestamps out of reports so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic crowd dataset in the canonical layout.
    Synth(synth::SynthArgs),
    /// Render ground-truth density maps for a dataset.
    GenDensity(density::DensityArgs),
    /// Train the per-frame counting network.
    TrainLcn(train::LcnArgs),
    /// Train the temporal fusion network on top of a counting network.
    TrainTan(train::TanArgs),
    /// Count every frame of a video directory.
    Infer(infer::InferArgs),
    /// Score a model or a counts file against annotated data.
    Eval(report::EvalArgs),
    /// Measure streaming inference throughput.
    Bench(report::BenchArgs),
    /// Report parameter counts.
    Params(report::ParamsArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let globals = Globals::load(cli.config.as_deref(), cli.seed, cli.no_timestamp)?;
    match cli.command {
        Command::Synth(a) => synth::run(&globals, a),
        Command::GenDensity(a) => density::run(&globals, a),
        Command::TrainLcn(a) => train::run_lcn(&globals, a),
        Command::TrainTan(a) => train::run_tan(&globals, a),
        Command::Infer(a) => infer::run(&globals, a),
        Command::Eval(a) => report::run_eval(&globals, a),
        Command::Bench(a) => report::run_bench(&globals, a),
        Command::Params(a) => report::run_params(&globals, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
