//! `grrcoca`: train, evaluate, caption, count parameters, check gradients
//! and generate synthetic data.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grrcoca::Error;

#[derive(Parser)]
#[command(
    name = "grrcoca",
    version,
    about = "Contrastive captioner with GEGLU, RMSNorm and RoPE"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration; writes metrics.csv, best.ckpt and
    /// resolved-config.json into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory, overriding output.run_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its validation split or on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for evaluation.csv; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedily caption one image.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Parameter counts per group for both encoder variants.
    ParamCount {
        /// Uses the model section; defaults to the full-size model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every layer kind and both losses.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Perturb the analytic gradients; every check must then fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Write a synthetic manifest and its PNG images.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Data(_)
        | Error::Checkpoint(_)
        | Error::InvalidArgument { .. }
        | Error::ShapeMismatch { .. } => 3,
        Error::NonFinite(_) | Error::Domain { .. } => 4,
        Error::Io { .. } | Error::Csv(_) => 5,
    }
}

/// Caps the worker pool at `GRRCOCA_THREADS` when set.
fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GRRCOCA_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("GRRCOCA_THREADS: expected a positive integer, got {v:?}"))
        })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("GRRCOCA_THREADS: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    init_threads()?;
    match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&config, seed, out)?,
        Command::Evaluate {
            checkpoint,
            config,
            manifest,
            out,
        } => commands::cmd_evaluate(&checkpoint, config.as_deref(), manifest.as_deref(), out)?,
        Command::Caption {
            checkpoint,
            image,
            max_len,
        } => commands::cmd_caption(&checkpoint, &image, max_len)?,
        Command::ParamCount { config } => commands::cmd_param_count(config.as_deref())?,
        Command::GradCheck {
            tolerance,
            seeds,
            inject_bug,
        } => return commands::cmd_grad_check(tolerance, seeds, inject_bug),
        Command::SynthData {
            out,
            n,
            split,
            seed,
            size,
        } => commands::cmd_synth_data(&out, n, &split, seed, size)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // Gradient check failures are numerical failures.
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
