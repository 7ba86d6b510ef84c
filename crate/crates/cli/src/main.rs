//! `dmri`: experiment harness for dynamic MR reconstruction.
//!
//! Every subcommand writes its outputs, a `config.resolved.json` snapshot
//! and a `manifest.csv` of output CRCs into `--output`. Exit codes: 0 on
//! success, 2 on invalid input or configuration, 3 on numerical failure.
//! Errors are reported as one JSON line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmri::Error;

use crate::commands::Run;
use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "dmri",
    version,
    about = "Dynamic MRI reconstruction experiments"
)]
struct Cli {
    /// JSON experiment config; defaults are used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    output: PathBuf,
    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Train and run networks in 64-bit floating point
    #[arg(long, global = true)]
    float64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic dynamic phantoms (optionally sheared into patches)
    GenerateData,
    /// Generate a k-t sampling mask and its density report
    MakeMask,
    /// Train a CRDN on a dataset with simulated undersampling
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Reconstruct a dataset with a trained network
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// TV-regularized compressed-sensing reconstruction
    Baseline {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// MSE / PSNR / SSIM of reconstructions against references
    Evaluate {
        #[arg(long)]
        reconstruction: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and loss
    Gradcheck,
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn run(cli: Cli) -> dmri::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .resolve(cli.seed)?;
    let run = Run {
        config,
        output: cli.output,
        force: cli.force,
        float64: cli.float64,
    };
    match cli.command {
        Command::GenerateData => commands::generate_data(&run),
        Command::MakeMask => commands::make_mask(&run),
        Command::Train { dataset } => commands::train_cmd(&run, dataset),
        Command::Reconstruct {
            checkpoint,
            dataset,
            mask,
        } => commands::reconstruct_cmd(&run, checkpoint, dataset, mask),
        Command::Baseline { dataset, mask } => commands::baseline_cmd(&run, dataset, mask),
        Command::Evaluate {
            reconstruction,
            reference,
        } => commands::evaluate_cmd(&run, reconstruction, reference),
        Command::Gradcheck => commands::gradcheck_cmd(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Numerical(m)) => fail("numerical", &m, 3),
        Err(Error::Format(m)) => fail("format", &m, 2),
        Err(Error::InvalidArgument(m)) => fail("validation", &m, 2),
        Err(Error::Io(e)) => fail("io", &e.to_string(), 2),
    }
}
