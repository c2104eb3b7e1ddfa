//! Batch driver: generate or load scenes, run the detection pipeline,
//! compute losses and metrics, and write report files.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

#[derive(Parser, Debug)]
#[command(name = "fomo3d", about = "Multi-modal 3D detection pipeline driver")]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,

    /// e2e | proposals-only | eval-only | selftest (overrides the config).
    #[arg(long)]
    mode: Option<String>,

    /// Base seed (overrides the config; FOMO_SEED is the last fallback).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Number of scenes (overrides the config).
    #[arg(long)]
    scenes: Option<usize>,

    /// Worker threads for scene processing.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Dotted-path config overrides, e.g. --set pipeline.top_k=100.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
