//! `phc`: train, evaluate, gradient-check, and inspect PHC graph networks.
//!
//! Errors are printed to stderr as one line, `error: <kind>: <detail>`,
//! and the process exits with status 1 (2 for usage errors). Log verbosity
//! comes from the `PHC_LOG` environment variable (`env_logger` syntax,
//! default `info`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "phc", version, about = "Parameterized hypercomplex graph networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the configured model on a fixed 8-node graph.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Coordinates sampled per parameter tensor; 0 checks all of them.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Write every layer's assembled weight and contribution matrices as CSV.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Gen {
        /// ring-regression, triangle-count, or component-parity.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHC_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out, resume } => commands::train(&config, seed, out, resume),
        Command::Eval { config, checkpoint, data } => commands::eval(&config, &checkpoint, &data),
        Command::Gradcheck { config, coords } => commands::gradcheck(&config, coords),
        Command::Inspect { checkpoint, out } => commands::inspect(&checkpoint, &out),
        Command::Gen { kind, size, seed, out } => commands::gen(&kind, size, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace(['\n', '\r'], " "));
            ExitCode::FAILURE
        }
    }
}
