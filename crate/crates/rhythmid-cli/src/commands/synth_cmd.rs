use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use serde_json::json;

use rhythmid::facs;
use rhythmid::synthgen::{self, VariabilityLevel};
use rhythmid::RngState;

use super::write_atomic;

#[derive(Subcommand)]
pub enum SynthCommand {
    /// Generate a synthetic speaker-rhythm corpus (and optional x-vectors).
    Gen(GenArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Number of synthetic speakers.
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 50)]
    utts_per_speaker: usize,
    /// Held-out utterances per speaker (written to --test-alignments).
    #[arg(long, default_value_t = 0)]
    test_utts_per_speaker: usize,
    /// Inter-speaker signature separation (0 = identical speakers).
    #[arg(long, default_value_t = 1.5)]
    separation: f64,
    /// Intra-speaker variability level (0 = perfectly stable).
    #[arg(long, default_value_t = 0.5)]
    variability: f64,
    /// Sentence list, one per line; bundled sentences when omitted.
    #[arg(long)]
    texts_file: Option<PathBuf>,
    #[arg(long, env = "RHYTHMID_SEED", default_value_t = 42)]
    seed: u64,
    /// Training alignments output (JSON lines).
    #[arg(long)]
    out_alignments: PathBuf,
    /// Held-out alignments output; required when --test-utts-per-speaker > 0.
    #[arg(long)]
    test_alignments: Option<PathBuf>,
    /// Optional x-vector table output (covers train and test utterances).
    #[arg(long)]
    xvec_out: Option<PathBuf>,
    /// X-vector dimension.
    #[arg(long, default_value_t = 16)]
    xvec_dim: usize,
    /// X-vector informativeness in [0, 1]; 1 = exact cluster centers.
    #[arg(long, default_value_t = 0.9)]
    xvec_informativeness: f64,
}

pub fn run(command: SynthCommand) -> anyhow::Result<String> {
    let SynthCommand::Gen(args) = command;
    if args.test_utts_per_speaker > 0 && args.test_alignments.is_none() {
        bail!("--test-utts-per-speaker needs --test-alignments");
    }
    let texts_owned: Vec<String> = match &args.texts_file {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::to_string)
            .filter(|l| !l.trim().is_empty())
            .collect(),
        None => synthgen::default_texts().iter().map(|s| s.to_string()).collect(),
    };
    let texts: Vec<&str> = texts_owned.iter().map(String::as_str).collect();
    let variability = VariabilityLevel::new(args.variability)?;

    let mut rng = RngState::seed_from(args.seed);
    let profiles = synthgen::gen_profiles(
        args.speakers,
        &synthgen::default_alphabet(),
        args.separation,
        &mut rng,
    )?;
    let train = synthgen::gen_corpus(
        &profiles,
        &texts,
        args.utts_per_speaker,
        variability,
        &rng.derive(100),
    )?;
    let mut buf = Vec::new();
    facs::write_alignment_file(&mut buf, &train)?;
    write_atomic(&args.out_alignments, &buf)?;

    let mut test = Vec::new();
    if args.test_utts_per_speaker > 0 {
        // Held-out utterances come from an independent stream but keep the
        // training id scheme, so re-key them for uniqueness.
        test = synthgen::gen_corpus(
            &profiles,
            &texts,
            args.test_utts_per_speaker,
            variability,
            &rng.derive(200),
        )?;
        for u in &mut test {
            u.utt_id = format!("test_{}", u.utt_id);
        }
        let mut buf = Vec::new();
        facs::write_alignment_file(&mut buf, &test)?;
        write_atomic(args.test_alignments.as_ref().expect("checked"), &buf)?;
    }

    let mut xvec_entries = 0usize;
    if let Some(path) = &args.xvec_out {
        let mut all = train.clone();
        all.extend(test.iter().cloned());
        let table = synthgen::gen_xvectors(
            &profiles,
            &all,
            args.xvec_informativeness,
            args.xvec_dim,
            &mut rng.derive(300),
        )?;
        let mut buf = Vec::new();
        table.save(&mut buf)?;
        write_atomic(path, &buf)?;
        xvec_entries = table.len();
    }

    Ok(json!({
        "command": "synth gen",
        "speakers": args.speakers,
        "train_utterances": train.len(),
        "test_utterances": test.len(),
        "xvec_entries": xvec_entries,
        "seed": args.seed,
        "out": args.out_alignments,
    })
    .to_string())
}
