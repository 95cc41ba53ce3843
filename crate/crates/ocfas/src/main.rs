use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ocfas::commands;
use ocfas::Error;

/// One-class face anti-spoofing experiment runner.
#[derive(Parser)]
#[command(name = "ocfas", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a dataset split with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or a registry id when --config is given.
        dataset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split to score: train, dev, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output score CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a named protocol over score CSVs (one per repetition).
    Evaluate {
        /// Protocol name from the config.
        protocol: String,
        #[arg(long)]
        config: PathBuf,
        /// Score CSV per repetition.
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        /// Labeled scores used to calibrate the threshold; defaults to
        /// calibrating on the test scores themselves.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the full prompt expansion of every template family.
    DumpPrompts {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one sampled pseudo spoof cue map per position as PNG.
    DumpScm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the mask images.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> ocfas::Result<()> {
    match cli.command {
        Command::Train { config, seed, out, checkpoint } => {
            commands::cmd_train(&config, seed, out, checkpoint)
        }
        Command::Score { checkpoint, dataset, config, split, out } => {
            commands::cmd_score(&checkpoint, &dataset, config.as_deref(), &split, &out)
        }
        Command::Evaluate { protocol, config, scores, calibration, out } => {
            commands::cmd_evaluate(&config, &protocol, &scores, calibration.as_deref(), out)
        }
        Command::DumpPrompts { config, out } => {
            commands::cmd_dump_prompts(config.as_deref(), out.as_deref())
        }
        Command::DumpScm { config, seed, out } => {
            commands::cmd_dump_scm(config.as_deref(), seed, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
