use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use serde_json::json;

use rhythmid::checkpoint::{self, CheckpointKind};
use rhythmid::facs;
use rhythmid::fusion::load_xvectors;
use rhythmid::metrics::{ConfusionMatrix, MetricsReport};
use rhythmid::training::{evaluate, SpeakerTable, TrainData};

use super::{load_vocab, open, write_atomic};

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (any kind).
    #[arg(long)]
    checkpoint: PathBuf,
    /// FACS corpus to score.
    #[arg(long)]
    facs: PathBuf,
    /// Vocabulary file (must match the checkpoint's vocabulary).
    #[arg(long)]
    vocab: PathBuf,
    /// X-vector table; required for fusion and baseline checkpoints.
    #[arg(long)]
    xvectors: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Optional confusion-matrix CSV dump.
    #[arg(long)]
    confusion: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

pub fn run(args: EvalArgs) -> anyhow::Result<String> {
    let bytes = std::fs::read(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let header = checkpoint::peek_header(bytes.as_slice())?;
    let vocab = load_vocab(&args.vocab)?;
    if let Some(hash) = &header.vocab_sha256 {
        if *hash != vocab.sha256_hex() {
            bail!("vocabulary does not match the one the checkpoint was trained with");
        }
    }
    let seqs = facs::read_facs_corpus(open(&args.facs)?, &vocab, 20)
        .with_context(|| format!("reading corpus {}", args.facs.display()))?;
    let table = match &args.xvectors {
        Some(path) => Some(
            load_xvectors(open(path)?)
                .with_context(|| format!("loading x-vectors {}", path.display()))?,
        ),
        None => None,
    };
    let speakers = SpeakerTable::from_labels(header.speakers.clone());
    let max_tokens = header
        .encoder
        .as_ref()
        .map(|c| c.max_len)
        .unwrap_or(usize::MAX);

    let needs_xvec = matches!(
        header.kind,
        CheckpointKind::Fusion | CheckpointKind::XvectorBaseline
    );
    if needs_xvec && table.is_none() {
        bail!("this checkpoint kind needs --xvectors");
    }
    let data = TrainData::with_speaker_table(
        seqs,
        if needs_xvec { table } else { None },
        max_tokens,
        speakers,
    )?;
    let indices: Vec<usize> = (0..data.len()).collect();

    let (cm, _ba): (ConfusionMatrix, f64) = match header.kind {
        CheckpointKind::Rhythm => {
            let (model, _) = checkpoint::load_rhythm::<_, f32>(bytes.as_slice())?;
            evaluate(&model, &data, &indices, args.batch_size)?
        }
        CheckpointKind::Fusion => {
            let (model, _) = checkpoint::load_fusion::<_, f32>(bytes.as_slice())?;
            evaluate(&model, &data, &indices, args.batch_size)?
        }
        CheckpointKind::XvectorBaseline => {
            let (model, _) = checkpoint::load_baseline::<_, f32>(bytes.as_slice())?;
            evaluate(&model, &data, &indices, args.batch_size)?
        }
    };

    let report = MetricsReport::from_confusion(&cm)?;
    write_atomic(&args.report, report.to_json().as_bytes())?;
    if let Some(path) = &args.confusion {
        let mut buf = Vec::new();
        cm.to_csv(&mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(json!({
        "command": "eval",
        "kind": header.kind,
        "balanced_accuracy": report.balanced_accuracy,
        "accuracy": report.accuracy,
        "chance_level": report.chance_level,
        "n_samples": report.n_samples,
        "report": args.report,
    })
    .to_string())
}
