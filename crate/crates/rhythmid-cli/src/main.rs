//! Command-line pipeline for rhythm-based speaker identification.
//!
//! Subcommands cover the full workflow: synthesize or ingest aligned
//! transcripts, build a vocabulary, encode frame-aligned character
//! sequences, train (rhythm-only, fusion, or x-vector baseline), evaluate
//! a checkpoint, and gradient-check the numeric core. Every command is
//! seeded and reproducible; primary outputs are written atomically and a
//! one-line JSON summary goes to stdout on success.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rhythmid", version, about = "Speaker identification from speech rhythm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Frame-aligned character sequence tools.
    Facs {
        #[command(subcommand)]
        command: commands::facs_cmd::FacsCommand,
    },
    /// Vocabulary tools.
    Vocab {
        #[command(subcommand)]
        command: commands::vocab_cmd::VocabCommand,
    },
    /// Synthetic corpus generation.
    Synth {
        #[command(subcommand)]
        command: commands::synth_cmd::SynthCommand,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        command: commands::train_cmd::TrainCommand,
    },
    /// Evaluate a checkpoint on a FACS corpus.
    Eval(commands::eval_cmd::EvalArgs),
    /// Finite-difference checks of every differentiable op and the encoder.
    Gradcheck(commands::gradcheck_cmd::GradcheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Facs { command } => commands::facs_cmd::run(command),
        Command::Vocab { command } => commands::vocab_cmd::run(command),
        Command::Synth { command } => commands::synth_cmd::run(command),
        Command::Train { command } => commands::train_cmd::run(command),
        Command::Eval(args) => commands::eval_cmd::run(args),
        Command::Gradcheck(args) => commands::gradcheck_cmd::run(args),
    };
    match result {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
