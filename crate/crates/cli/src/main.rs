mod commands;
mod config;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fssam2::Strategy;

use config::Mode;

const EXIT_CHECK: u8 = 1;
const EXIT_TRAINING: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_NO_INPUT: u8 = 66;

#[derive(Parser, Debug)]
#[command(
    name = "fssam2",
    version,
    about = "Few-shot segmentation with memory attention and LoRA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to the output directory.
    Synth,
    /// Train every parameter on video-like episodes of the base classes.
    Pretrain,
    /// Episodic training of the parameters a strategy selects.
    Metatrain,
    /// Evaluate a checkpoint and write a report.
    Eval,
    /// Fold LoRA adapters into the base weights.
    Merge,
    /// Run the fast invariant suite.
    Verify {
        /// Deliberately break one component to confirm the suite notices.
        #[arg(long, hide = true, value_parser = ["dice"])]
        mutate: Option<String>,
    },
}

/// Flags shared by every command; each overrides the config file key of
/// the same name.
#[derive(Args, Debug, Default)]
pub struct Flags {
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long = "K", global = true, value_name = "K")]
    k: Option<usize>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, global = true, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
        format!(
            "unknown strategy `{s}`; expected one of {}",
            names.join(", ")
        )
    })
}

/// Error carrying the process exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: EXIT_USAGE,
        message: message.into(),
    }
    .into()
}

pub fn missing_input(path: &Path, err: impl std::fmt::Display) -> anyhow::Error {
    Exit {
        code: EXIT_NO_INPUT,
        message: format!("cannot read {}: {err}", path.display()),
    }
    .into()
}

pub fn check_failed(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: EXIT_CHECK,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(exit) = err.downcast_ref::<Exit>() {
        return exit.code;
    }
    match err.downcast_ref::<fssam2::Error>() {
        Some(fssam2::Error::Training { .. }) => EXIT_TRAINING,
        Some(fssam2::Error::Config(_)) => EXIT_USAGE,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Verify { mutate } = &cli.command {
        return verify::run(mutate.as_deref());
    }
    let cfg = config::RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Metatrain => commands::metatrain(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Merge => commands::merge(&cfg),
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
