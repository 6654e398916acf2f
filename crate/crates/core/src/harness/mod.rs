//! Configuration, CLI dispatch, run directories and the toy dataset.

pub mod config;
pub mod run;
pub mod toy;

pub use config::{load, resolve, toy_distill, toy_pretrain, ConfigError, Mode, RunConfig};
pub use run::{load_encoder, resolve_checkpoint, run, HarnessError, RunOutcome};

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "depthssl", version, about = "Self-supervised pretraining and evaluation on metric depth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-distillation pretraining of the ViT encoder
    Pretrain(RunArgs),
    /// Distill a pretrained teacher into student encoders
    Distill(RunArgs),
    /// Weighted k-NN classification on frozen features
    Knn(RunArgs),
    /// Linear classification probe on frozen features
    Probe(RunArgs),
    /// Linear segmentation probe on frozen dense features
    Segment(RunArgs),
    /// PCA false-color maps of dense features
    #[command(name = "pca_viz")]
    PcaViz(RunArgs),
    /// Global channel statistics of the training manifest
    Stats(RunArgs),
    /// Encoder forward latency
    Bench(RunArgs),
    /// Write the analytic toy dataset
    #[command(name = "gen_toy")]
    GenToy(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; built-in toy defaults fill anything it leaves out
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a dotted key, e.g. `--set pretrain.batch_size=8`
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (same as `--set output_dir=...`)
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn split(self) -> (Mode, RunArgs) {
        match self {
            Command::Pretrain(a) => (Mode::Pretrain, a),
            Command::Distill(a) => (Mode::Distill, a),
            Command::Knn(a) => (Mode::Knn, a),
            Command::Probe(a) => (Mode::Probe, a),
            Command::Segment(a) => (Mode::Segment, a),
            Command::PcaViz(a) => (Mode::PcaViz, a),
            Command::Stats(a) => (Mode::Stats, a),
            Command::Bench(a) => (Mode::Bench, a),
            Command::GenToy(a) => (Mode::GenToy, a),
        }
    }
}

/// Parse, resolve and run; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (mode, args) = cli.command.split();
    let mut overrides = args.set;
    if let Some(out) = args.out {
        overrides.push(format!("output_dir={}", toml::Value::String(out.display().to_string())));
    }
    let cfg = match load(args.config.as_deref(), &overrides, Some(mode)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&cfg) {
        Ok(o) => {
            for r in &o.reports {
                println!("{}", r.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
