use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;

use rhythmid::checkpoint;
use rhythmid::encoder::RhythmEncoderConfig;
use rhythmid::facs::{self, Vocabulary};
use rhythmid::fusion::{load_xvectors, FusionAssembly, FusionConfig, FusionOp, XVectorBaseline};
use rhythmid::tensor::graph::Activation;
use rhythmid::training::{self, TrainConfig, TrainData, TrainRun};
use rhythmid::RngState;

use super::{load_vocab, open};

#[derive(Subcommand)]
pub enum TrainCommand {
    /// Train the rhythm-only encoder.
    Rhythm(RhythmArgs),
    /// Train the fused rhythm + x-vector classifier.
    Fusion(FusionArgs),
    /// Train the linear classifier on x-vectors alone.
    XvecBaseline(BaselineArgs),
}

/// Flags shared by every training mode. Unset values fall back to the
/// mode's reference defaults (epochs 300/300/150, lr 1e-4/1e-3/1e-3,
/// batch 32, validation fraction 0.10, patience 15, max tokens 1024).
#[derive(Args)]
pub struct CommonArgs {
    /// FACS corpus file (utt_id<TAB>speaker<TAB>facs).
    #[arg(long)]
    facs: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Run directory for config.json, loss.csv, val.csv, best.ckpt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Cosine schedule floor [default: 0].
    #[arg(long)]
    eta_min: Option<f64>,
    /// Fraction of utterances held out for validation [default: 0.1].
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Non-improving evaluations tolerated before stopping [default: 15].
    #[arg(long)]
    patience: Option<usize>,
    /// Sequence truncation length in tokens [default: 1024].
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, env = "RHYTHMID_SEED", default_value_t = 42)]
    seed: u64,
}

impl CommonArgs {
    fn config(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr0: self.lr.unwrap_or(base.lr0),
            eta_min: self.eta_min.unwrap_or(base.eta_min),
            val_fraction: self.val_fraction.unwrap_or(base.val_fraction),
            patience: self.patience.unwrap_or(base.patience),
            max_tokens: self.max_tokens.unwrap_or(base.max_tokens),
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ActivationArg {
    Gelu,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

/// Encoder architecture flags.
#[derive(Args)]
pub struct ModelArgs {
    /// Embedding width.
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 8)]
    n_heads: usize,
    /// Transformer layers.
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    /// Feed-forward width [default: 4 * d_model].
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Attention window radius in tokens.
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Dropout rate.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Feed-forward activation.
    #[arg(long, value_enum, default_value_t = ActivationArg::Gelu)]
    activation: ActivationArg,
}

impl ModelArgs {
    fn encoder_config(
        &self,
        vocab_size: usize,
        n_speakers: usize,
        max_len: usize,
    ) -> RhythmEncoderConfig {
        let mut c = RhythmEncoderConfig::new(vocab_size, n_speakers);
        c.d_model = self.d_model;
        c.n_heads = self.n_heads;
        c.n_layers = self.n_layers;
        c.ffn_dim = self.ffn_dim.unwrap_or(4 * self.d_model);
        c.attn_window_radius = self.window;
        c.dropout_rate = self.dropout;
        c.max_len = max_len;
        c.activation = self.activation.into();
        c
    }
}

#[derive(Args)]
pub struct RhythmArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
pub struct FusionArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Precomputed x-vector table (TSV).
    #[arg(long)]
    xvectors: PathBuf,
    /// Pretrained rhythm checkpoint to start from; fresh weights when
    /// omitted.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Projection width for both streams.
    #[arg(long, default_value_t = 128)]
    d_proj: usize,
    /// Stream combination.
    #[arg(long, value_enum, default_value_t = FusionOpArg::Concat)]
    fusion_op: FusionOpArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionOpArg {
    Concat,
    Sum,
}

impl From<FusionOpArg> for FusionOp {
    fn from(op: FusionOpArg) -> Self {
        match op {
            FusionOpArg::Concat => FusionOp::Concat,
            FusionOpArg::Sum => FusionOp::Sum,
        }
    }
}

#[derive(Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Precomputed x-vector table (TSV).
    #[arg(long)]
    xvectors: PathBuf,
}

pub fn run(command: TrainCommand) -> anyhow::Result<String> {
    match command {
        TrainCommand::Rhythm(args) => rhythm(args),
        TrainCommand::Fusion(args) => fusion(args),
        TrainCommand::XvecBaseline(args) => baseline(args),
    }
}

fn load_corpus(
    common: &CommonArgs,
    max_tokens: usize,
    xvectors: Option<&PathBuf>,
) -> anyhow::Result<(Vocabulary, TrainData)> {
    let vocab = load_vocab(&common.vocab)?;
    let seqs = facs::read_facs_corpus(open(&common.facs)?, &vocab, 20)
        .with_context(|| format!("reading corpus {}", common.facs.display()))?;
    let table = match xvectors {
        Some(path) => Some(
            load_xvectors(open(path)?)
                .with_context(|| format!("loading x-vectors {}", path.display()))?,
        ),
        None => None,
    };
    let data = TrainData::new(seqs, table, max_tokens)?;
    Ok((vocab, data))
}

fn finish_run(
    out_dir: &PathBuf,
    config_json: String,
    run: &TrainRun,
    checkpoint_bytes: Vec<u8>,
    command: &str,
    config: &TrainConfig,
) -> anyhow::Result<String> {
    training::write_run_dir(out_dir, &config_json, run, &checkpoint_bytes)?;
    Ok(json!({
        "command": command,
        "epochs_ran": run.evals.len(),
        "steps": run.steps.len(),
        "best_epoch": run.best_epoch,
        "best_balanced_accuracy": run.best_balanced_accuracy,
        "stop": run.stop,
        "seed": config.seed,
        "out_dir": out_dir,
    })
    .to_string())
}

fn rhythm(args: RhythmArgs) -> anyhow::Result<String> {
    let config = args.common.config(TrainConfig::rhythm());
    config.validate()?;
    let (vocab, data) = load_corpus(&args.common, config.max_tokens, None)?;
    let enc_config =
        args.model
            .encoder_config(vocab.size(), data.speakers.len(), config.max_tokens);
    let mut rng = RngState::seed_from(config.seed);
    let model = rhythmid::RhythmEncoder32::init(enc_config.clone(), &mut rng)?;
    let (best, run) = training::train(&config, &data, model)?;

    let mut ckpt = Vec::new();
    checkpoint::save_rhythm(
        &mut ckpt,
        &best,
        data.speakers.labels(),
        Some(vocab.sha256_hex()),
    )?;
    let config_json = serde_json::to_string_pretty(&json!({
        "train": config,
        "model": enc_config,
    }))?;
    finish_run(&args.common.out_dir, config_json, &run, ckpt, "train rhythm", &config)
}

fn fusion(args: FusionArgs) -> anyhow::Result<String> {
    let config = args.common.config(TrainConfig::fusion());
    config.validate()?;
    let (vocab, data) = load_corpus(&args.common, config.max_tokens, Some(&args.xvectors))?;
    let xvec_dim = data.xvectors.as_ref().expect("loaded above").dim();
    let mut rng = RngState::seed_from(config.seed);

    let rhythm = match &args.init_checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let (model, header) = checkpoint::load_rhythm::<_, f32>(bytes.as_slice())?;
            if let Some(hash) = &header.vocab_sha256 {
                if *hash != vocab.sha256_hex() {
                    bail!(
                        "checkpoint {} was trained with a different vocabulary",
                        path.display()
                    );
                }
            }
            if header.speakers != data.speakers.labels() {
                bail!(
                    "checkpoint {} speaker table does not match the corpus",
                    path.display()
                );
            }
            model
        }
        None => {
            let enc_config =
                args.model
                    .encoder_config(vocab.size(), data.speakers.len(), config.max_tokens);
            rhythmid::RhythmEncoder32::init(enc_config, &mut rng)?
        }
    };
    let mut fusion_config = FusionConfig::new(xvec_dim);
    fusion_config.d_proj = args.d_proj;
    fusion_config.op = args.fusion_op.into();
    let enc_config = rhythm.config().clone();
    let assembly = FusionAssembly::init(rhythm, fusion_config.clone(), &mut rng.derive(7))?;
    let (best, run) = training::train(&config, &data, assembly)?;

    let mut ckpt = Vec::new();
    checkpoint::save_fusion(
        &mut ckpt,
        &best,
        data.speakers.labels(),
        Some(vocab.sha256_hex()),
    )?;
    let config_json = serde_json::to_string_pretty(&json!({
        "train": config,
        "model": enc_config,
        "fusion": fusion_config,
        "pretrained": args.init_checkpoint.is_some(),
    }))?;
    finish_run(&args.common.out_dir, config_json, &run, ckpt, "train fusion", &config)
}

fn baseline(args: BaselineArgs) -> anyhow::Result<String> {
    let config = args.common.config(TrainConfig::xvector_baseline());
    config.validate()?;
    let (_, data) = load_corpus(&args.common, config.max_tokens, Some(&args.xvectors))?;
    let xvec_dim = data.xvectors.as_ref().expect("loaded above").dim();
    let mut rng = RngState::seed_from(config.seed);
    let head = XVectorBaseline::<f32>::init(xvec_dim, data.speakers.len(), &mut rng);
    let (best, run) = training::train(&config, &data, head)?;

    let mut ckpt = Vec::new();
    checkpoint::save_baseline(&mut ckpt, &best, data.speakers.labels())?;
    let config_json = serde_json::to_string_pretty(&json!({
        "train": config,
        "xvec_dim": xvec_dim,
    }))?;
    finish_run(
        &args.common.out_dir,
        config_json,
        &run,
        ckpt,
        "train xvec-baseline",
        &config,
    )
}

