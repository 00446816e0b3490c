use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use serde_json::json;

use rhythmid::facs;

use super::{load_vocab, open, write_atomic};

#[derive(Subcommand)]
pub enum FacsCommand {
    /// Encode aligned transcripts into a FACS corpus file.
    Encode(EncodeArgs),
    /// Decode FACS text into (symbol, frame count) runs.
    Decode(DecodeArgs),
}

#[derive(Args)]
pub struct EncodeArgs {
    /// JSON-lines alignment input.
    #[arg(long)]
    alignments: PathBuf,
    /// Vocabulary file (from `vocab build`).
    #[arg(long)]
    vocab: PathBuf,
    /// Output corpus file (utt_id<TAB>speaker<TAB>facs per line).
    #[arg(long)]
    out: PathBuf,
    /// Frame length in milliseconds.
    #[arg(long, default_value_t = 20)]
    frame_ms: u32,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// A single FACS string to decode.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// A FACS corpus file to decode line by line.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Where to write the decoded runs (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(command: FacsCommand) -> anyhow::Result<String> {
    match command {
        FacsCommand::Encode(args) => encode(args),
        FacsCommand::Decode(args) => decode(args),
    }
}

fn encode(args: EncodeArgs) -> anyhow::Result<String> {
    let vocab = load_vocab(&args.vocab)?;
    let (utterances, report) = facs::parse_alignment_file(open(&args.alignments)?)
        .context("parsing alignments")?;
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
    let seqs = facs::encode_corpus(&utterances, &vocab, args.frame_ms)?;
    let mut buf = Vec::new();
    facs::write_facs_corpus(&mut buf, &seqs, &vocab)?;
    write_atomic(&args.out, &buf)?;
    Ok(json!({
        "command": "facs encode",
        "utterances": seqs.len(),
        "discarded": report.total(),
        "frame_ms": args.frame_ms,
        "out": args.out,
    })
    .to_string())
}

fn decode(args: DecodeArgs) -> anyhow::Result<String> {
    let vocab = load_vocab(&args.vocab)?;
    let render = |text: &str| -> anyhow::Result<serde_json::Value> {
        let runs = facs::facs_decode(text, &vocab)?;
        let rendered: Vec<serde_json::Value> = runs
            .iter()
            .map(|&(id, count)| {
                let symbol = vocab.char_of(id).map(String::from).unwrap_or_default();
                json!([symbol, count])
            })
            .collect();
        Ok(serde_json::Value::Array(rendered))
    };

    let mut lines = Vec::new();
    let decoded = match (&args.text, &args.input) {
        (Some(text), None) => {
            lines.push(json!({"runs": render(text)?}).to_string());
            1
        }
        (None, Some(path)) => {
            let seqs = facs::read_facs_corpus(open(path)?, &vocab, 20)?;
            for seq in &seqs {
                let text = facs::facs_to_string(seq, &vocab)?;
                lines.push(
                    json!({"utt_id": seq.utt_id, "speaker": seq.speaker_id, "runs": render(&text)?})
                        .to_string(),
                );
            }
            seqs.len()
        }
        _ => bail!("pass exactly one of --text or --in"),
    };
    let body = lines.join("\n");
    match &args.out {
        Some(path) => write_atomic(path, format!("{body}\n").as_bytes())?,
        None => println!("{body}"),
    }
    Ok(json!({"command": "facs decode", "decoded": decoded, "out": args.out}).to_string())
}
