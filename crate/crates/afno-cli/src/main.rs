//! `afno` command-line entry point.
//!
//! Exit codes: 0 success, 1 failed verification (gradcheck), 2 invalid
//! configuration or arguments, 3 training aborted on a non-finite loss.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afno_core::error::Error;
use afno_core::mixers::MixerKind;

#[derive(Parser)]
#[command(
    name = "afno",
    version,
    about = "Train, benchmark, and analyze Fourier-domain token mixers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and evaluate it.
    Train {
        /// Path to a key = value run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for history.csv, checkpoint.afnt, manifest.txt.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the mixer kind (sa|gfn|fno|afno).
        #[arg(long)]
        mixer: Option<String>,
        /// Override the soft-shrinkage threshold.
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the AFNO block count.
        #[arg(long)]
        blocks: Option<usize>,
        /// Override the kept low-frequency mode fraction.
        #[arg(long = "keep-fraction")]
        keep_fraction: Option<f64>,
    },
    /// Measure forward latency over a token-grid sweep.
    Bench {
        /// Mixer kind (sa|gfn|fno|afno).
        #[arg(long)]
        mixer: String,
        /// Comma-separated token grids, e.g. "32x32,64x64".
        #[arg(long, default_value = "32x32,64x64")]
        sizes: String,
        /// Channel size.
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// AFNO block count.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Timed repetitions (>= 5).
        #[arg(long, default_value_t = 7)]
        repeats: usize,
        /// Discarded warmup runs (>= 2).
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Optional output directory for bench.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the complexity formulas.
    Flops {
        /// Mixer kind (sa|gfn|fno|afno).
        #[arg(long)]
        kind: String,
        /// Sequence length N = h*w.
        #[arg(long)]
        n: usize,
        /// Channel size.
        #[arg(long)]
        d: usize,
        /// AFNO block count.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Print the full per-kind table and model-scale estimates.
        #[arg(long)]
        table: bool,
        /// Optional output directory for report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shrinkage sparsity statistics of a trained AFNO checkpoint.
    Sparsity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of synthetic probe inputs.
        #[arg(long, default_value_t = 8)]
        inputs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Finite-difference gradient audit of the mixers.
    Gradcheck {
        /// Check every mixer kind.
        #[arg(long)]
        all: bool,
        /// Check a single mixer kind.
        #[arg(long)]
        mixer: Option<String>,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a random-walk mask as AFNT plus a PGM preview.
    Maskgen {
        /// Grid height.
        #[arg(long)]
        h: usize,
        /// Grid width.
        #[arg(long)]
        w: usize,
        /// Walk length.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("AFNO_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            afno_core::parallel::configure_threads(n);
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cli: Cli) -> afno_core::error::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            mixer,
            lambda,
            blocks,
            keep_fraction,
        } => {
            let ov = commands::TrainOverrides {
                seed,
                mixer: mixer.as_deref().map(str::parse).transpose()?,
                lambda,
                blocks,
                keep_fraction,
            };
            commands::cmd_train(&config, &out, &ov)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            mixer,
            sizes,
            d,
            k,
            repeats,
            warmup,
            out,
        } => {
            let kind = commands::parse_mixer(&mixer)?;
            let sizes = commands::parse_sizes(&sizes)?;
            commands::cmd_bench(kind, &sizes, d, k, repeats, warmup, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Flops {
            kind,
            n,
            d,
            k,
            table,
            out,
        } => {
            let kind = commands::parse_mixer(&kind)?;
            commands::cmd_flops(kind, n, d, k, table, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sparsity {
            config,
            checkpoint,
            inputs,
            seed,
            out,
        } => {
            commands::cmd_sparsity(&config, &checkpoint, inputs, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            all,
            mixer,
            eps,
            tol,
            seed,
        } => {
            let kinds: Vec<MixerKind> = if all {
                vec![MixerKind::Sa, MixerKind::Gfn, MixerKind::Fno, MixerKind::Afno]
            } else if let Some(m) = mixer {
                vec![commands::parse_mixer(&m)?]
            } else {
                return Err(Error::InvalidArgument {
                    op: "gradcheck",
                    message: "pass --all or --mixer".to_string(),
                });
            };
            let ok = commands::cmd_gradcheck(&kinds, eps, tol, seed)?;
            if ok {
                println!("gradcheck: all parameters within tolerance");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck: FAILED");
                Ok(ExitCode::from(1))
            }
        }
        Command::Maskgen { h, w, steps, seed, out } => {
            commands::cmd_maskgen(h, w, steps, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
