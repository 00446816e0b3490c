//! Training protocol: split, schedule, loop, early stopping, run output.
//!
//! One seed drives everything — the train/validation split, per-epoch
//! shuffles and dropout draws — so identical configurations reproduce
//! identical loss logs and checkpoints byte for byte. Validation balanced
//! accuracy is evaluated once per epoch; the best-scoring snapshot (not the
//! last) is returned, and training stops early once `patience` consecutive
//! evaluations fail to improve on it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Batch, EncoderError, RhythmEncoderModel};
use crate::facs::FacsSequence;
use crate::fusion::{
    check_alignment, FusionAssembly, FusionError, XVectorBaseline, XVectorTable,
};
use crate::metrics::{argmax, balanced_accuracy, ConfusionMatrix, MetricsError};
use crate::scalar::Scalar;
use crate::tensor::rng::RngState;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("speaker {0:?} has fewer than 2 utterances")]
    SpeakerTooFew(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown speaker {0:?} (not in the label table)")]
    UnknownSpeaker(String),
    #[error("this mode requires x-vectors but none were provided")]
    MissingXVectors,
    #[error("{0} utterances lack x-vectors, first: {1:?}")]
    UnalignedXVectors(usize, String),
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}): {source}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    RhythmOnly,
    Fusion,
    XvectorBaseline,
}

/// Training hyperparameters. The per-mode constructors carry the reference
/// defaults; every field is overridable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub eta_min: f64,
    pub val_fraction: f64,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn rhythm() -> Self {
        Self {
            mode: TrainMode::RhythmOnly,
            epochs: 300,
            batch_size: 32,
            lr0: 1e-4,
            eta_min: 0.0,
            val_fraction: 0.10,
            patience: 15,
            max_tokens: 1024,
            seed: 42,
        }
    }

    pub fn fusion() -> Self {
        Self {
            mode: TrainMode::Fusion,
            lr0: 1e-3,
            ..Self::rhythm()
        }
    }

    pub fn xvector_baseline() -> Self {
        Self {
            mode: TrainMode::XvectorBaseline,
            epochs: 150,
            lr0: 1e-3,
            ..Self::rhythm()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.val_fraction.is_finite() || self.val_fraction <= 0.0 || self.val_fraction >= 1.0 {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(TrainError::InvalidConfig("max_tokens must be positive".into()));
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 || self.eta_min < 0.0 || self.eta_min > self.lr0 {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 < lr0 and 0 <= eta_min <= lr0, got lr0={} eta_min={}",
                self.lr0, self.eta_min
            )));
        }
        Ok(())
    }
}

/// Sorted, deduplicated speaker labels; index order is the class order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerTable {
    labels: Vec<String>,
}

impl SpeakerTable {
    pub fn from_sequences(seqs: &[FacsSequence]) -> Self {
        let set: std::collections::BTreeSet<String> =
            seqs.iter().map(|s| s.speaker_id.clone()).collect();
        Self {
            labels: set.into_iter().collect(),
        }
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        Self { labels }
    }

    pub fn index_of(&self, speaker: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(speaker)).ok()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A loaded dataset: truncated sequences sorted by utterance id, resolved
/// class labels and (optionally) aligned x-vectors.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sequences: Vec<FacsSequence>,
    pub labels: Vec<usize>,
    pub speakers: SpeakerTable,
    pub xvectors: Option<XVectorTable>,
}

impl TrainData {
    pub fn new(
        sequences: Vec<FacsSequence>,
        xvectors: Option<XVectorTable>,
        max_tokens: usize,
    ) -> Result<Self, TrainError> {
        let speakers = SpeakerTable::from_sequences(&sequences);
        Self::with_speaker_table(sequences, xvectors, max_tokens, speakers)
    }

    /// Like [`TrainData::new`] but against a fixed label table (the
    /// evaluation path, where classes come from a checkpoint).
    pub fn with_speaker_table(
        sequences: Vec<FacsSequence>,
        xvectors: Option<XVectorTable>,
        max_tokens: usize,
        speakers: SpeakerTable,
    ) -> Result<Self, TrainError> {
        if sequences.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if max_tokens == 0 {
            return Err(TrainError::InvalidConfig(
                "max_tokens must be positive".into(),
            ));
        }
        let mut sequences: Vec<FacsSequence> = sequences
            .into_iter()
            .map(|s| crate::facs::truncate(&s, max_tokens))
            .collect();
        sequences.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        for s in &sequences {
            if s.is_empty() {
                return Err(EncoderError::EmptySequence(s.utt_id.clone()).into());
            }
        }
        let labels = sequences
            .iter()
            .map(|s| {
                speakers
                    .index_of(&s.speaker_id)
                    .ok_or_else(|| TrainError::UnknownSpeaker(s.speaker_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(table) = &xvectors {
            let ids: Vec<&str> = sequences.iter().map(|s| s.utt_id.as_str()).collect();
            if let Err(missing) = check_alignment(&ids, table) {
                return Err(TrainError::UnalignedXVectors(
                    missing.len(),
                    missing.into_iter().next().unwrap_or_default(),
                ));
            }
        }
        Ok(Self {
            sequences,
            labels,
            speakers,
            xvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<TrainBatch<T>, TrainError> {
        let seqs: Vec<&FacsSequence> = indices.iter().map(|&i| &self.sequences[i]).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let tokens = Batch::new(&seqs, &labels)?;
        let xvecs = match &self.xvectors {
            Some(table) => {
                let ids: Vec<&str> = seqs.iter().map(|s| s.utt_id.as_str()).collect();
                Some(table.gather::<T>(&ids)?)
            }
            None => None,
        };
        Ok(TrainBatch { tokens, xvecs })
    }
}

/// One padded batch plus optional aligned x-vector rows.
pub struct TrainBatch<T> {
    pub tokens: Batch,
    pub xvecs: Option<Tensor<T>>,
}

/// A model trainable by [`train`]: anything that can produce speaker logits
/// on a graph with its leased parameters.
pub trait SpeakerClassifier<T: Scalar>: Clone {
    fn n_speakers(&self) -> usize;
    fn parameters(&self) -> Vec<&Tensor<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Records the forward pass, returning leased parameter vars (in
    /// `parameters()` order) and the logits var.
    fn logits_graph(
        &self,
        g: &mut Graph<T>,
        batch: &TrainBatch<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Vec<Var>, Var), TrainError>;
}

impl<T: Scalar> SpeakerClassifier<T> for RhythmEncoderModel<T> {
    fn n_speakers(&self) -> usize {
        self.config().n_speakers
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        RhythmEncoderModel::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        RhythmEncoderModel::parameters_mut(self)
    }

    fn logits_graph(
        &self,
        g: &mut Graph<T>,
        batch: &TrainBatch<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Vec<Var>, Var), TrainError> {
        let (leased, out) = self.forward_graph(g, &batch.tokens, training, rng)?;
        Ok((leased.flat(), out.logits))
    }
}

impl<T: Scalar> SpeakerClassifier<T> for FusionAssembly<T> {
    fn n_speakers(&self) -> usize {
        FusionAssembly::n_speakers(self)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        FusionAssembly::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        FusionAssembly::parameters_mut(self)
    }

    fn logits_graph(
        &self,
        g: &mut Graph<T>,
        batch: &TrainBatch<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Vec<Var>, Var), TrainError> {
        let xv = batch.xvecs.as_ref().ok_or(TrainError::MissingXVectors)?;
        let (leased, logits) = self.forward_graph(g, &batch.tokens, xv, training, rng)?;
        Ok((leased.flat(), logits))
    }
}

impl<T: Scalar> SpeakerClassifier<T> for XVectorBaseline<T> {
    fn n_speakers(&self) -> usize {
        XVectorBaseline::n_speakers(self)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        XVectorBaseline::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        XVectorBaseline::parameters_mut(self)
    }

    fn logits_graph(
        &self,
        g: &mut Graph<T>,
        batch: &TrainBatch<T>,
        _training: bool,
        _rng: &mut RngState,
    ) -> Result<(Vec<Var>, Var), TrainError> {
        let xv = batch.xvecs.as_ref().ok_or(TrainError::MissingXVectors)?;
        Ok(self.forward_graph(g, xv)?)
    }
}

/// Cosine-annealed learning rate:
/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> f64 {
    assert!(total_steps >= 1, "total_steps must be positive");
    assert!(step <= total_steps, "step beyond schedule horizon");
    let progress = step as f64 / total_steps as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Utterance-level random split. Every speaker keeps at least one training
/// utterance; validation is never empty. Deterministic in the seed.
pub fn split_train_val<S: AsRef<str>>(
    speaker_ids: &[S],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if speaker_ids.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !val_fraction.is_finite() || val_fraction <= 0.0 || val_fraction >= 1.0 {
        return Err(TrainError::InvalidConfig(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
    for s in speaker_ids {
        *remaining.entry(s.as_ref()).or_insert(0) += 1;
    }
    for (speaker, &count) in &remaining {
        if count < 2 {
            return Err(TrainError::SpeakerTooFew(speaker.to_string()));
        }
    }
    let n = speaker_ids.len();
    let n_speakers = remaining.len();
    let target = ((n as f64 * val_fraction).round() as usize)
        .max(1)
        .min(n - n_speakers);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngState::seed_from(seed);
    rng.shuffle(&mut order);

    let mut val = Vec::with_capacity(target);
    for &idx in &order {
        if val.len() == target {
            break;
        }
        let speaker = speaker_ids[idx].as_ref();
        let left = remaining.get_mut(speaker).expect("speaker counted");
        // A speaker's last remaining utterance stays in training.
        if *left > 1 {
            *left -= 1;
            val.push(idx);
        }
    }
    let in_val: std::collections::BTreeSet<usize> = val.iter().copied().collect();
    let train: Vec<usize> = (0..n).filter(|i| !in_val.contains(i)).collect();
    let mut val: Vec<usize> = in_val.into_iter().collect();
    val.sort_unstable();
    Ok((train, val))
}

/// Seeded epoch order, chopped into batches; the last short batch is kept.
pub fn shuffled_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut RngState,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub balanced_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStopped { at_epoch: usize },
}

/// Full record of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_epoch: usize,
    pub best_balanced_accuracy: f64,
    pub stop: StopReason,
}

impl TrainRun {
    /// `step,epoch,lr,loss` lines.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.step, s.epoch, s.lr, s.loss);
        }
        out
    }

    /// `epoch,balanced_accuracy` lines.
    pub fn val_csv(&self) -> String {
        let mut out = String::from("epoch,balanced_accuracy\n");
        for e in &self.evals {
            let _ = writeln!(out, "{},{}", e.epoch, e.balanced_accuracy);
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Evaluates a model over `indices` of `data`, accumulating a confusion
/// matrix. Deterministic: evaluation consumes no randomness.
pub fn evaluate<T: Scalar, M: SpeakerClassifier<T>>(
    model: &M,
    data: &TrainData,
    indices: &[usize],
    batch_size: usize,
) -> Result<(ConfusionMatrix, f64), TrainError> {
    let mut cm = ConfusionMatrix::new(model.n_speakers());
    let mut rng = RngState::seed_from(0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let (_, logits) = model.logits_graph(&mut g, &batch, false, &mut rng)?;
        let values = g.value(logits);
        for (row, &label) in batch.tokens.labels().iter().enumerate() {
            cm.add(label, argmax(values.row(row)))?;
        }
    }
    let ba = balanced_accuracy(&cm)?;
    Ok((cm, ba))
}

/// Runs the full protocol and returns the best-validation model snapshot
/// with the run record.
pub fn train<T: Scalar, M: SpeakerClassifier<T>>(
    config: &TrainConfig,
    data: &TrainData,
    mut model: M,
) -> Result<(M, TrainRun), TrainError> {
    config.validate()?;
    if matches!(config.mode, TrainMode::Fusion | TrainMode::XvectorBaseline)
        && data.xvectors.is_none()
    {
        return Err(TrainError::MissingXVectors);
    }
    let (train_idx, val_idx) = split_train_val(
        &data
            .sequences
            .iter()
            .map(|s| s.speaker_id.as_str())
            .collect::<Vec<_>>(),
        config.val_fraction,
        config.seed,
    )?;

    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut rng = RngState::seed_from(config.seed).derive(1);
    let mut adam = AdamState::new(&SpeakerClassifier::parameters(&model));
    let adam_cfg = AdamConfig::default();

    let mut steps = Vec::with_capacity(total_steps);
    let mut evals = Vec::with_capacity(config.epochs);
    let mut best_model = model.clone();
    let mut best_ba = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut stop = StopReason::EpochsExhausted;
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        for (batch_no, batch_idx) in shuffled_batches(&train_idx, config.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let batch = data.batch::<T>(&batch_idx)?;
            let lr = cosine_lr(step, total_steps, config.lr0, config.eta_min);
            let mut g = Graph::new();
            let step_result = (|| -> Result<(Vec<Var>, Var), TrainError> {
                let (vars, logits) = model.logits_graph(&mut g, &batch, true, &mut rng)?;
                let loss = g.cross_entropy(logits, batch.tokens.labels())?;
                g.backward(loss)?;
                Ok((vars, loss))
            })();
            let (vars, loss) = step_result.map_err(|e| match e {
                TrainError::Tensor(t @ TensorError::NonFinite { .. }) => TrainError::NonFiniteLoss {
                    step,
                    epoch,
                    batch: batch_no,
                    source: t,
                },
                TrainError::Encoder(EncoderError::Tensor(t @ TensorError::NonFinite { .. })) => {
                    TrainError::NonFiniteLoss {
                        step,
                        epoch,
                        batch: batch_no,
                        source: t,
                    }
                }
                other => other,
            })?;
            let loss_value = g.value(loss).data()[0].as_f64();
            let grads: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
            drop(g);
            let mut params = model.parameters_mut();
            adam_step(&mut params, &grads, &mut adam, lr, &adam_cfg)?;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: loss_value,
            });
            step += 1;
        }

        let (_, ba) = evaluate(&model, data, &val_idx, config.batch_size)?;
        evals.push(EvalRecord {
            epoch,
            balanced_accuracy: ba,
        });
        if ba > best_ba {
            best_ba = ba;
            best_epoch = epoch;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                stop = StopReason::EarlyStopped { at_epoch: epoch };
                break 'epochs;
            }
        }
    }

    Ok((
        best_model,
        TrainRun {
            steps,
            evals,
            best_epoch,
            best_balanced_accuracy: best_ba,
            stop,
        },
    ))
}

/// Writes the run directory: `config.json`, `loss.csv`, `val.csv` and the
/// best checkpoint under `best.ckpt`. All writes are atomic.
pub fn write_run_dir(
    dir: &Path,
    config_json: &str,
    run: &TrainRun,
    checkpoint: &[u8],
) -> Result<(), TrainError> {
    crate::util::atomic_write(&dir.join("config.json"), config_json.as_bytes())?;
    crate::util::atomic_write(&dir.join("loss.csv"), run.loss_csv().as_bytes())?;
    crate::util::atomic_write(&dir.join("val.csv"), run.val_csv().as_bytes())?;
    crate::util::atomic_write(&dir.join("best.ckpt"), checkpoint)?;
    Ok(())
}
