use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use replica_cli::commands::{self, Arm};
use replica_cli::{CliError, RunConfig, OUTPUT_DIR_ENV};
use replica_core::data::Split;

#[derive(Parser)]
#[command(
    name = "replica",
    about = "Synthetic lesion translation and detection pipeline"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory and the environment variable.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    Synth,
    /// Train the autoencoder to the overfit threshold.
    TrainAe,
    /// Translate train-split tumors into normal images.
    Translate,
    /// Train the detector.
    #[command(group(ArgGroup::new("arm").required(true).args(["with_translation", "baseline"])))]
    TrainDet {
        #[arg(long)]
        with_translation: bool,
        #[arg(long)]
        baseline: bool,
    },
    /// Write detections for one split as JSONL.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score detections against one split.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the composed models.
    Gradcheck,
    /// Baseline versus translation-augmented training over several seeds.
    Ab {
        #[arg(long, num_args = 1.., default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    } else if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::TrainAe => commands::train_ae(&cfg),
        Command::Translate => commands::translate(&cfg),
        Command::TrainDet {
            with_translation, ..
        } => {
            let arm = if with_translation {
                Arm::Translation
            } else {
                Arm::Baseline
            };
            commands::train_det(&cfg, arm)
        }
        Command::Infer {
            checkpoint,
            split,
            out,
        } => commands::infer(&cfg, &checkpoint, split, out.as_deref()),
        Command::Eval {
            detections,
            split,
            out,
        } => commands::eval(&cfg, &detections, split, out.as_deref()),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Ab { seeds } => commands::ab(&cfg, &seeds).map(|r| r.csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            if !report.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
