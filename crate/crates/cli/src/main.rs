//! `dualalign` command-line harness.
//!
//! Exit codes: 0 success, 1 internal or numeric failure, 2 usage or config error.
//! Log verbosity comes from `DUALALIGN_LOG` (env_logger filter syntax, default `info`).

mod commands;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualalign::Error;

#[derive(Parser)]
#[command(name = "dualalign", version, about = "Semi-supervised proxy/prototype metric learning on synthetic proposals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        /// Output path, or `-` for standard output.
        #[arg(long)]
        out: String,
    },
    /// Train, writing metrics, checkpoints and a final evaluation to --out-dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write a checkpoint every N iterations (0 = final checkpoint only).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Optional config; supplies seed, margin and proxy_loss_form.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Corrupt one family's analytic gradient (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Multi-seed comparison of method variants across labeled fractions.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated labeled fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        fractions: Vec<f64>,
        /// Comma-separated variants (full, baseline, no_prototype_alignment, no_proposal_alignment).
        #[arg(long, value_delimiter = ',', default_value = "full,baseline,no_prototype_alignment,no_proposal_alignment")]
        variants: Vec<String>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::NonFinite { .. } => 1,
        Error::DimensionMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::MissingKey(_)
        | Error::Parse { .. }
        | Error::Checkpoint(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DUALALIGN_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { config, out } => commands::datagen(&config, &out),
        Command::Train {
            config,
            data,
            out_dir,
            checkpoint_every,
            resume,
        } => commands::train(&config, &data, &out_dir, checkpoint_every, resume.as_deref()),
        Command::Eval { checkpoint, data } => commands::eval(&checkpoint, &data),
        Command::Gradcheck {
            config,
            trials,
            tolerance,
            inject_fault,
        } => commands::gradcheck(config.as_deref(), trials, tolerance, inject_fault.as_deref()),
        Command::Sweep {
            config,
            seeds,
            fractions,
            variants,
        } => commands::sweep(&config, seeds, &fractions, &variants),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
