use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use serde_json::json;

use rhythmid::facs::{self, Vocabulary};

use super::{open, write_atomic};

#[derive(Subcommand)]
pub enum VocabCommand {
    /// Build a vocabulary from aligned transcripts.
    Build(BuildArgs),
}

#[derive(Args)]
pub struct BuildArgs {
    /// JSON-lines alignment input.
    #[arg(long)]
    alignments: PathBuf,
    /// Output vocabulary file (id<TAB>symbol lines, reserved first).
    #[arg(long)]
    out: PathBuf,
}

pub fn run(command: VocabCommand) -> anyhow::Result<String> {
    let VocabCommand::Build(args) = command;
    let (utterances, report) =
        facs::parse_alignment_file(open(&args.alignments)?).context("parsing alignments")?;
    if report.total() > 0 {
        eprintln!(
            "discarded {} invalid records: {}",
            report.total(),
            serde_json::to_string(&report)?
        );
    }
    if utterances.is_empty() {
        bail!("no valid utterances in {}", args.alignments.display());
    }
    let vocab = Vocabulary::build(&utterances)?;
    write_atomic(&args.out, vocab.to_tsv().as_bytes())?;
    Ok(json!({
        "command": "vocab build",
        "size": vocab.size(),
        "sha256": vocab.sha256_hex(),
        "out": args.out,
    })
    .to_string())
}
