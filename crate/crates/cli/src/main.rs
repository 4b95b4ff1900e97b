mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use settings::TrainSettings;

/// Tree-structured sentiment classifiers with subtree attention.
#[derive(Debug, Parser)]
#[command(name = "treesent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(Box<TrainSettings>),
    /// Root accuracy of a checkpoint on a tree file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Root predictions as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Root predictions with attention weights as JSON lines.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write the weighted trees as a Graphviz DOT file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Break one op's backward rule (negative control).
        #[arg(long)]
        corrupt_op: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(s) => commands::cmd_train(s.with_file()?.plan()?).map(|_| true),
        Command::Eval { checkpoint, test } => commands::cmd_eval(&checkpoint, &test).map(|_| true),
        Command::Predict { checkpoint, test } => commands::cmd_predict(&checkpoint, &test, false, None).map(|_| true),
        Command::DumpAttention { checkpoint, test, dot } => {
            commands::cmd_predict(&checkpoint, &test, true, dot).map(|_| true)
        }
        Command::Gradcheck { seed, corrupt_op } => commands::cmd_gradcheck(seed, corrupt_op.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
