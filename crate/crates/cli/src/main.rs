use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modalfuse_cli::commands::{
    cmd_ablate, cmd_eval, cmd_sample, cmd_train, load_config, thread_cap, AblateArgs, EvalArgs,
    SampleArgs, TrainArgs,
};
use modalfuse_cli::config::RunConfig;
use modalfuse_cli::CliError;

#[derive(Parser)]
#[command(name = "modalfuse", version, about = "Train, sample and evaluate modality-separated toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.txt, metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint; its fingerprint must match.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint and exit after this step.
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Sample images for a caption such as "a red square".
    Sample {
        checkpoint: PathBuf,
        prompt: String,
        #[arg(long, default_value_t = 1.55)]
        w: f64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on text likelihood, generation and captioning.
    Eval {
        checkpoint: PathBuf,
        /// Config whose eval.* and data.* keys replace the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the separation x learning-rate-ratio grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            resume,
            seed,
            out,
            stop_after,
        } => {
            let dir = cmd_train(TrainArgs {
                config: load_config(&config)?,
                out,
                resume,
                seed,
                stop_after,
            })?;
            println!("{}", dir.display());
        }
        Command::Sample {
            checkpoint,
            prompt,
            w,
            count,
            seed,
            out,
        } => {
            for p in cmd_sample(SampleArgs {
                checkpoint,
                prompt,
                w,
                count,
                seed,
                out,
            })? {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, config, out } => {
            let config = config.map(|p| load_config(&p)).transpose()?;
            let (report, path) = cmd_eval(EvalArgs { checkpoint, config, out })?;
            print!("{}", modalfuse_cli::commands::report_summary(&report));
            println!("{}", path.display());
        }
        Command::Ablate { config, out } => {
            let config = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let dir = cmd_ablate(AblateArgs {
                config,
                out,
                threads: thread_cap(),
            })?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
