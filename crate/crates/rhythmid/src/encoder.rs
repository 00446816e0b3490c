//! The rhythm encoder: a transformer over frame-aligned character tokens.
//!
//! Token embeddings plus fixed sinusoidal positions feed a stack of
//! post-norm transformer layers whose self-attention is restricted to a
//! local window of `attn_window_radius` tokens on each side. The final
//! states are mean-pooled over real (non-padding) positions and a single
//! affine head maps the pooled vector to speaker logits.
//!
//! Padding never influences results: attention runs on the valid prefix of
//! each row and pooling skips padded positions, so appending padding leaves
//! embeddings and logits unchanged.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::facs::{FacsSequence, PAD_ID};
use crate::scalar::Scalar;
pub use crate::tensor::graph::Activation;
use crate::tensor::rng::RngState;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("batch width {len} exceeds model max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("utterance {0} has no tokens")]
    EmptySequence(String),
    #[error("batch has {labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("parameter list has {got} tensors, expected {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("parameter {index} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        index: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture knobs. Defaults follow the reference setup: 128-wide
/// embeddings, 8 heads, a +/-2-token attention window and dropout 0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmEncoderConfig {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub attn_window_radius: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub activation: Activation,
}

impl RhythmEncoderConfig {
    pub fn new(vocab_size: usize, n_speakers: usize) -> Self {
        Self {
            vocab_size,
            n_speakers,
            d_model: 128,
            n_heads: 8,
            n_layers: 4,
            ffn_dim: 512,
            attn_window_radius: 2,
            dropout_rate: 0.1,
            max_len: 1024,
            activation: Activation::Gelu,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be at least 1".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must cover the reserved ids".into());
        }
        if self.n_speakers == 0 {
            return fail("n_speakers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Fixed sinusoidal positional table:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<T: Scalar>(max_len: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(max_len * d_model);
    for p in 0..max_len {
        for j in 0..d_model {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![max_len, d_model], data).expect("consistent shape")
}

/// Boolean window mask: entry `(i, j)` is true iff `|i - j| <= radius`.
pub fn local_attention_mask(seq_len: usize, radius: usize) -> Vec<Vec<bool>> {
    (0..seq_len)
        .map(|i| {
            (0..seq_len)
                .map(|j| i.abs_diff(j) <= radius)
                .collect()
        })
        .collect()
}

/// Additive form of the window mask: 0 inside the window, -inf outside.
fn additive_window_mask<T: Scalar>(seq_len: usize, radius: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(seq_len * seq_len);
    for row in local_attention_mask(seq_len, radius) {
        for allowed in row {
            data.push(if allowed { T::zero() } else { T::neg_infinity() });
        }
    }
    Tensor::new(vec![seq_len, seq_len], data).expect("consistent shape")
}

/// A padded batch of token rows with validity information.
#[derive(Clone, Debug)]
pub struct Batch {
    ids: Vec<usize>,
    batch: usize,
    width: usize,
    lengths: Vec<usize>,
    labels: Vec<usize>,
    validity: Arc<Vec<bool>>,
}

impl Batch {
    /// Pads sequences to the longest row in the batch. Every row must hold
    /// at least one token.
    pub fn new(seqs: &[&FacsSequence], labels: &[usize]) -> Result<Self, EncoderError> {
        if labels.len() != seqs.len() {
            return Err(EncoderError::LabelCount {
                labels: labels.len(),
                rows: seqs.len(),
            });
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut validity = Vec::with_capacity(seqs.len() * width);
        for seq in seqs {
            if seq.is_empty() {
                return Err(EncoderError::EmptySequence(seq.utt_id.clone()));
            }
            lengths.push(seq.len());
            for &id in &seq.token_ids {
                ids.push(id as usize);
                validity.push(true);
            }
            for _ in seq.len()..width {
                ids.push(PAD_ID as usize);
                validity.push(false);
            }
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            width,
            lengths,
            labels: labels.to_vec(),
            validity: Arc::new(validity),
        })
    }

    pub fn size(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Weights of one transformer layer, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
struct LayerParams<T> {
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    ln1_gain: Tensor<T>,
    ln1_bias: Tensor<T>,
    ff1_w: Tensor<T>,
    ff1_b: Tensor<T>,
    ff2_w: Tensor<T>,
    ff2_b: Tensor<T>,
    ln2_gain: Tensor<T>,
    ln2_bias: Tensor<T>,
}

/// All learnable state of the encoder.
///
/// The canonical parameter order (used by [`RhythmEncoderModel::parameters`],
/// [`RhythmEncoderModel::from_parameters`] and the checkpoint payload) is:
/// embedding table, then per layer `wq, bq, wk, bk, wv, bv, wo, bo,
/// ln1_gain, ln1_bias, ff1_w, ff1_b, ff2_w, ff2_b, ln2_gain, ln2_bias`,
/// then `head_w, head_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RhythmEncoderModel<T> {
    config: RhythmEncoderConfig,
    embedding: Tensor<T>,
    layers: Vec<LayerParams<T>>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

/// Graph handles for one leased copy of the parameters.
pub struct LeasedParams {
    embedding: Var,
    layers: Vec<[Var; 16]>,
    head_w: Var,
    head_b: Var,
}

impl LeasedParams {
    /// Rebuilds the handle structure from a flat var list in canonical
    /// parameter order.
    pub fn from_vars(config: &RhythmEncoderConfig, vars: &[Var]) -> Result<Self, EncoderError> {
        let expected = param_count(config);
        if vars.len() != expected {
            return Err(EncoderError::ParamCount {
                got: vars.len(),
                expected,
            });
        }
        let mut it = vars.iter().copied();
        let embedding = it.next().expect("count checked");
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut layer = [embedding; 16];
            for slot in &mut layer {
                *slot = it.next().expect("count checked");
            }
            layers.push(layer);
        }
        let head_w = it.next().expect("count checked");
        let head_b = it.next().expect("count checked");
        Ok(Self {
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for layer in &self.layers {
            out.extend_from_slice(layer);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Number of parameter tensors implied by a config.
pub fn param_count(config: &RhythmEncoderConfig) -> usize {
    1 + config.n_layers * 16 + 2
}

/// Graph outputs of one forward pass.
pub struct ForwardVars {
    /// Final-layer states, `[batch*width, d_model]`.
    pub states: Var,
    /// Pooled embeddings, `[batch, d_model]`.
    pub pooled: Var,
    /// Speaker logits, `[batch, n_speakers]`.
    pub logits: Var,
}

impl<T: Scalar> RhythmEncoderModel<T> {
    /// Fresh model: scaled-normal embeddings (sigma = 1/sqrt(d_model)),
    /// Xavier-uniform projection weights, zero biases, unit layer-norm
    /// gains. Deterministic in the seed via the draw order, which matches
    /// the canonical parameter order.
    pub fn init(config: RhythmEncoderConfig, rng: &mut RngState) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let sigma = 1.0 / (d as f64).sqrt();
        let embedding = normal_tensor(rng, vec![config.vocab_size, d], sigma);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: xavier_tensor(rng, d, d),
                bq: Tensor::zeros(vec![d]),
                wk: xavier_tensor(rng, d, d),
                bk: Tensor::zeros(vec![d]),
                wv: xavier_tensor(rng, d, d),
                bv: Tensor::zeros(vec![d]),
                wo: xavier_tensor(rng, d, d),
                bo: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::filled(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                ff1_w: xavier_tensor(rng, d, config.ffn_dim),
                ff1_b: Tensor::zeros(vec![config.ffn_dim]),
                ff2_w: xavier_tensor(rng, config.ffn_dim, d),
                ff2_b: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
            });
        }
        let head_w = xavier_tensor(rng, d, config.n_speakers);
        let head_b = Tensor::zeros(vec![config.n_speakers]);
        Ok(Self {
            config,
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &RhythmEncoderConfig {
        &self.config
    }

    /// Parameter tensors in canonical order.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gain, &l.ln1_bias,
                &l.ff1_w, &l.ff1_b, &l.ff2_w, &l.ff2_b, &l.ln2_gain, &l.ln2_bias,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ff1_w,
                &mut l.ff1_b,
                &mut l.ff2_w,
                &mut l.ff2_b,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Rebuilds a model from tensors in canonical parameter order.
    pub fn from_parameters(
        config: RhythmEncoderConfig,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = param_count(&config);
        if tensors.len() != expected {
            return Err(EncoderError::ParamCount {
                got: tensors.len(),
                expected,
            });
        }
        let reference = Self::init(config.clone(), &mut RngState::seed_from(0))?;
        for (index, (got, want)) in tensors
            .iter()
            .zip(reference.parameters())
            .enumerate()
        {
            if got.shape() != want.shape() {
                return Err(EncoderError::ParamShape {
                    index,
                    got: got.shape().to_vec(),
                    expected: want.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let embedding = it.next().expect("count checked");
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: it.next().expect("count checked"),
                bq: it.next().expect("count checked"),
                wk: it.next().expect("count checked"),
                bk: it.next().expect("count checked"),
                wv: it.next().expect("count checked"),
                bv: it.next().expect("count checked"),
                wo: it.next().expect("count checked"),
                bo: it.next().expect("count checked"),
                ln1_gain: it.next().expect("count checked"),
                ln1_bias: it.next().expect("count checked"),
                ff1_w: it.next().expect("count checked"),
                ff1_b: it.next().expect("count checked"),
                ff2_w: it.next().expect("count checked"),
                ff2_b: it.next().expect("count checked"),
                ln2_gain: it.next().expect("count checked"),
                ln2_bias: it.next().expect("count checked"),
            });
        }
        let head_w = it.next().expect("count checked");
        let head_b = it.next().expect("count checked");
        Ok(Self {
            config,
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    /// Leases every parameter into the graph as a gradient-tracked leaf.
    pub fn lease(&self, g: &mut Graph<T>) -> LeasedParams {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|t| g.param(t.clone()))
            .collect();
        LeasedParams::from_vars(&self.config, &vars).expect("canonical order")
    }

    /// Records the full forward pass on `g` using leased parameter handles.
    pub fn forward_leased(
        g: &mut Graph<T>,
        config: &RhythmEncoderConfig,
        p: &LeasedParams,
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<ForwardVars, EncoderError> {
        let (b_rows, width) = (batch.batch, batch.width);
        if width > config.max_len {
            return Err(EncoderError::TooLong {
                len: width,
                max: config.max_len,
            });
        }
        let d = config.d_model;
        let heads = config.n_heads;
        let dh = config.head_dim();
        let rate = config.dropout_rate;
        let inv_sqrt_dh = T::of(1.0 / (dh as f64).sqrt());

        // Embedding + positions, shared across rows via one stacked matrix.
        let emb = g.embedding_lookup(p.embedding, &batch.ids)?;
        let pe = positional_encoding::<T>(width, d);
        let mut pe_tiled = Vec::with_capacity(b_rows * width * d);
        for _ in 0..b_rows {
            pe_tiled.extend_from_slice(pe.data());
        }
        let pe_tiled = g.constant(Tensor::new(vec![b_rows * width, d], pe_tiled)?);
        let mut x = g.add(emb, pe_tiled)?;
        x = g.dropout(x, rate, training, rng)?;

        // Additive window masks per distinct valid length.
        let mut masks: BTreeMap<usize, Arc<Tensor<T>>> = BTreeMap::new();
        let mut mask_for = |n: usize| -> Arc<Tensor<T>> {
            Arc::clone(
                masks
                    .entry(n)
                    .or_insert_with(|| Arc::new(additive_window_mask(n, config.attn_window_radius))),
            )
        };

        for layer in &p.layers {
            let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b] =
                *layer;
            let q = g.matmul(x, wq)?;
            let q = g.add_bias(q, bq)?;
            let k = g.matmul(x, wk)?;
            let k = g.add_bias(k, bk)?;
            let v = g.matmul(x, wv)?;
            let v = g.add_bias(v, bv)?;

            // Attention runs on the valid prefix of each row; padded
            // positions are re-inserted as zeros so the stacked residual
            // layout survives.
            let mut row_blocks = Vec::with_capacity(b_rows);
            for row in 0..b_rows {
                let n = batch.lengths[row];
                let qr = g.slice_rows(q, row * width, n)?;
                let kr = g.slice_rows(k, row * width, n)?;
                let vr = g.slice_rows(v, row * width, n)?;
                let mask = mask_for(n);
                let mut head_outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = g.slice_cols(qr, h * dh, dh)?;
                    let kh = g.slice_cols(kr, h * dh, dh)?;
                    let vh = g.slice_cols(vr, h * dh, dh)?;
                    let kt = g.transpose(kh)?;
                    let scores = g.matmul(qh, kt)?;
                    let scores = g.scale(scores, inv_sqrt_dh)?;
                    let weights = g.row_softmax(scores, Some(Arc::clone(&mask)))?;
                    let weights = g.dropout(weights, rate, training, rng)?;
                    head_outs.push(g.matmul(weights, vh)?);
                }
                let mut block = g.concat_cols(&head_outs)?;
                if n < width {
                    let pad = g.constant(Tensor::zeros(vec![width - n, d]));
                    block = g.concat_rows(&[block, pad])?;
                }
                row_blocks.push(block);
            }
            let attn = if row_blocks.len() == 1 {
                row_blocks[0]
            } else {
                g.concat_rows(&row_blocks)?
            };
            let attn = g.matmul(attn, wo)?;
            let attn = g.add_bias(attn, bo)?;
            let res1 = g.add(x, attn)?;
            let normed = g.layer_norm(res1, ln1_g, ln1_b)?;

            let ff = g.matmul(normed, ff1_w)?;
            let ff = g.add_bias(ff, ff1_b)?;
            let ff = g.activation(ff, config.activation)?;
            let ff = g.matmul(ff, ff2_w)?;
            let ff = g.add_bias(ff, ff2_b)?;
            let ff = g.dropout(ff, rate, training, rng)?;
            let res2 = g.add(normed, ff)?;
            x = g.layer_norm(res2, ln2_g, ln2_b)?;
        }

        let pooled = g.mean_pool_masked(x, &batch.validity, width)?;
        let logits = g.matmul(pooled, p.head_w)?;
        let logits = g.add_bias(logits, p.head_b)?;
        Ok(ForwardVars {
            states: x,
            pooled,
            logits,
        })
    }

    /// Leases parameters onto a graph and records the forward pass,
    /// returning the leased handles alongside the outputs (the training
    /// path).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(LeasedParams, ForwardVars), EncoderError> {
        let leased = self.lease(g);
        let out = Self::forward_leased(g, &self.config, &leased, batch, training, rng)?;
        Ok((leased, out))
    }

    /// Evaluation-style forward returning `(pooled, logits)` values.
    pub fn forward(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Tensor<T>, Tensor<T>), EncoderError> {
        let mut g = Graph::new();
        let (_, out) = self.forward_graph(&mut g, batch, training, rng)?;
        Ok((g.value(out.pooled).clone(), g.value(out.logits).clone()))
    }

    /// Final-layer states in evaluation mode, `[batch*width, d_model]`.
    pub fn forward_states(&self, batch: &Batch) -> Result<Tensor<T>, EncoderError> {
        let mut g = Graph::new();
        let mut rng = RngState::seed_from(0);
        let (_, out) = self.forward_graph(&mut g, batch, false, &mut rng)?;
        Ok(g.value(out.states).clone())
    }

    /// Pooled pre-head embedding of a single sequence in evaluation mode.
    pub fn embed_utterance(&self, seq: &FacsSequence) -> Result<Vec<T>, EncoderError> {
        let batch = Batch::new(&[seq], &[0])?;
        let mut rng = RngState::seed_from(0);
        let (pooled, _) = self.forward(&batch, false, &mut rng)?;
        Ok(pooled.data().to_vec())
    }
}

fn normal_tensor<T: Scalar>(rng: &mut RngState, shape: Vec<usize>, sigma: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.standard_normal() * sigma))
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn xavier_tensor<T: Scalar>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.uniform(-limit, limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// Finite-difference check of the full encoder: every parameter coordinate
/// of a small two-layer model against central differences of the batch
/// cross-entropy. Returns the max relative error.
pub fn grad_check_encoder(seed: u64) -> Result<f64, EncoderError> {
    use crate::tensor::grad_check;

    let mut config = RhythmEncoderConfig::new(7, 3);
    config.d_model = 8;
    config.n_heads = 2;
    config.n_layers = 2;
    config.ffn_dim = 12;
    config.max_len = 8;
    config.attn_window_radius = 2;
    config.dropout_rate = 0.0;
    let mut rng = RngState::seed_from(seed);
    let model = RhythmEncoderModel::<f64>::init(config.clone(), &mut rng)?;

    let seq_a = FacsSequence {
        token_ids: vec![3, 3, 1, 4, 5],
        frame_ms: 20,
        utt_id: "a".into(),
        speaker_id: "s0".into(),
    };
    let seq_b = FacsSequence {
        token_ids: vec![6, 1, 2],
        frame_ms: 20,
        utt_id: "b".into(),
        speaker_id: "s1".into(),
    };
    let batch = Batch::new(&[&seq_a, &seq_b], &[0, 1])?;
    let targets = batch.labels().to_vec();

    let inputs: Vec<Tensor<f64>> = model.parameters().into_iter().cloned().collect();
    let err = grad_check(
        &move |g: &mut Graph<f64>, vars: &[Var]| {
            let leased = LeasedParams::from_vars(&config, vars)
                .map_err(|_| TensorError::NonFinite { op: "lease" })?;
            let mut rng = RngState::seed_from(0);
            let out =
                RhythmEncoderModel::<f64>::forward_leased(g, &config, &leased, &batch, false, &mut rng)
                    .map_err(|e| match e {
                        EncoderError::Tensor(t) => t,
                        _ => TensorError::NonFinite { op: "forward" },
                    })?;
            g.cross_entropy(out.logits, &targets)
        },
        &inputs,
        1e-5,
    )?;
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facs::TokenId;

    fn seq(ids: Vec<TokenId>, utt: &str) -> FacsSequence {
        FacsSequence {
            token_ids: ids,
            frame_ms: 20,
            utt_id: utt.to_string(),
            speaker_id: "spk".to_string(),
        }
    }

    fn tiny_config() -> RhythmEncoderConfig {
        let mut c = RhythmEncoderConfig::new(8, 3);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_layers = 1;
        c.ffn_dim = 16;
        c.max_len = 16;
        c
    }

    #[test]
    fn config_validation_catches_bad_combinations() {
        let mut c = RhythmEncoderConfig::new(8, 3);
        c.d_model = 10;
        c.n_heads = 4;
        assert!(matches!(c.validate(), Err(EncoderError::InvalidConfig(_))));
        let mut c = RhythmEncoderConfig::new(8, 3);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = RhythmEncoderConfig::new(8, 0);
        c.d_model = 8;
        assert!(c.validate().is_err());
        assert!(RhythmEncoderConfig::new(8, 3).validate().is_ok());
    }

    #[test]
    fn default_config_matches_reference_dimensions() {
        let c = RhythmEncoderConfig::new(30, 1166);
        assert_eq!(c.d_model, 128);
        assert_eq!(c.n_heads, 8);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.ffn_dim, 4 * c.d_model);
        assert_eq!(c.attn_window_radius, 2);
    }

    #[test]
    fn positional_encoding_closed_form_values() {
        let pe = positional_encoding::<f64>(4, 6);
        // row 0: sin(0)=0 on even columns, cos(0)=1 on odd columns
        for j in 0..6 {
            let expected = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.at2(0, j), expected);
        }
        assert!((pe.at2(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!((pe.at2(1, 0) - 0.8414709848078965).abs() < 1e-12);
        for &v in pe.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn local_mask_examples() {
        let m = local_attention_mask(4, 1);
        assert_eq!(
            m,
            vec![
                vec![true, true, false, false],
                vec![true, true, true, false],
                vec![false, true, true, true],
                vec![false, false, true, true],
            ]
        );
        // radius >= len-1 admits everything
        let full = local_attention_mask(5, 4);
        assert!(full.iter().flatten().all(|&x| x));
        // radius 2: interior tokens see exactly 5 positions
        let m = local_attention_mask(9, 2);
        for (i, row) in m.iter().enumerate() {
            let count = row.iter().filter(|&&x| x).count();
            if (2..7).contains(&i) {
                assert_eq!(count, 5);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_shapes_are_consistent() {
        let c = tiny_config();
        let a = RhythmEncoderModel::<f32>::init(c.clone(), &mut RngState::seed_from(4)).unwrap();
        let b = RhythmEncoderModel::<f32>::init(c.clone(), &mut RngState::seed_from(4)).unwrap();
        assert_eq!(a, b);
        let params = a.parameters();
        assert_eq!(params.len(), param_count(&c));
        assert_eq!(params[0].shape(), &[8, 8]); // vocab x d
        assert_eq!(a.head_w.shape(), &[8, 3]);
    }

    #[test]
    fn embedding_init_statistics_match_scaled_normal() {
        // pooled over 10 seeds: mean ~ 0, variance ~ 1/d
        let mut c = RhythmEncoderConfig::new(50, 3);
        c.d_model = 64;
        c.n_heads = 8;
        c.n_layers = 1;
        c.ffn_dim = 64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for seed in 0..10 {
            let m =
                RhythmEncoderModel::<f64>::init(c.clone(), &mut RngState::seed_from(seed)).unwrap();
            for &v in m.embedding.data() {
                sum += v;
                sum_sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var * 64.0 - 1.0).abs() < 0.1, "scaled variance {}", var * 64.0);
    }

    #[test]
    fn forward_shapes_follow_config() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f32>::init(c, &mut RngState::seed_from(1)).unwrap();
        let s1 = seq(vec![3, 4, 5, 1, 1, 6], "u1");
        let s2 = seq(vec![7, 1], "u2");
        let batch = Batch::new(&[&s1, &s2], &[0, 2]).unwrap();
        let mut rng = RngState::seed_from(2);
        let (pooled, logits) = model.forward(&batch, false, &mut rng).unwrap();
        assert_eq!(pooled.shape(), &[2, 8]);
        assert_eq!(logits.shape(), &[2, 3]);
    }

    #[test]
    fn single_token_pooling_is_identity_over_one_position() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f64>::init(c, &mut RngState::seed_from(3)).unwrap();
        let s = seq(vec![4], "u");
        let batch = Batch::new(&[&s], &[0]).unwrap();
        let states = model.forward_states(&batch).unwrap();
        let mut rng = RngState::seed_from(0);
        let (pooled, _) = model.forward(&batch, false, &mut rng).unwrap();
        assert_eq!(states.shape(), &[1, 8]);
        assert_eq!(pooled.data(), states.data());
    }

    #[test]
    fn token_id_out_of_range_is_an_error() {
        let c = tiny_config(); // vocab_size 8
        let model = RhythmEncoderModel::<f32>::init(c, &mut RngState::seed_from(1)).unwrap();
        let s = seq(vec![9], "u");
        let batch = Batch::new(&[&s], &[0]).unwrap();
        let mut rng = RngState::seed_from(0);
        let err = model.forward(&batch, false, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            EncoderError::Tensor(TensorError::IdOutOfRange { id: 9, vocab: 8 })
        ));
    }

    #[test]
    fn empty_row_is_rejected_at_batch_construction() {
        let s = seq(vec![], "empty-utt");
        let err = Batch::new(&[&s], &[0]).unwrap_err();
        assert!(matches!(err, EncoderError::EmptySequence(id) if id == "empty-utt"));
    }

    #[test]
    fn batch_wider_than_max_len_is_rejected() {
        let mut c = tiny_config();
        c.max_len = 4;
        let model = RhythmEncoderModel::<f32>::init(c, &mut RngState::seed_from(1)).unwrap();
        let s = seq(vec![3, 3, 3, 3, 3], "u");
        let batch = Batch::new(&[&s], &[0]).unwrap();
        let mut rng = RngState::seed_from(0);
        assert!(matches!(
            model.forward(&batch, false, &mut rng),
            Err(EncoderError::TooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn eval_forward_is_bit_identical_across_runs() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f32>::init(c, &mut RngState::seed_from(5)).unwrap();
        let s = seq(vec![3, 4, 5, 6, 7, 1, 1], "u");
        let batch = Batch::new(&[&s], &[1]).unwrap();
        let mut r1 = RngState::seed_from(11);
        let mut r2 = RngState::seed_from(99);
        let (p1, l1) = model.forward(&batch, false, &mut r1).unwrap();
        let (p2, l2) = model.forward(&batch, false, &mut r2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn padding_does_not_change_pooled_or_logits() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f32>::init(c, &mut RngState::seed_from(5)).unwrap();
        let short = seq(vec![3, 4, 5], "u");
        let long = seq(vec![3, 4, 5, 6, 6, 6, 6], "w");
        let alone = Batch::new(&[&short], &[0]).unwrap();
        let padded = Batch::new(&[&short, &long], &[0, 0]).unwrap();
        let mut rng = RngState::seed_from(0);
        let (p_alone, l_alone) = model.forward(&alone, false, &mut rng).unwrap();
        let (p_padded, l_padded) = model.forward(&padded, false, &mut rng).unwrap();
        for j in 0..8 {
            let diff = (p_alone.at2(0, j) - p_padded.at2(0, j)).abs();
            assert!(diff <= 1e-6, "pooled diff {diff}");
        }
        for j in 0..3 {
            let diff = (l_alone.at2(0, j) - l_padded.at2(0, j)).abs();
            assert!(diff <= 1e-6, "logit diff {diff}");
        }
    }

    #[test]
    fn receptive_field_is_bounded_by_layers_times_radius() {
        // With L layers and radius w, position i cannot see past L*w.
        for n_layers in [1usize, 2] {
            let mut c = tiny_config();
            c.n_layers = n_layers;
            c.attn_window_radius = 2;
            c.max_len = 32;
            let model =
                RhythmEncoderModel::<f64>::init(c, &mut RngState::seed_from(7)).unwrap();
            let base: Vec<TokenId> = (0..12).map(|i| 3 + (i % 5) as TokenId).collect();
            let pos = 2usize;
            let reach = n_layers * 2;
            let mut perturbed = base.clone();
            let far = pos + reach + 1;
            perturbed[far] = if perturbed[far] == 3 { 4 } else { 3 };
            let b1 = Batch::new(&[&seq(base, "a")], &[0]).unwrap();
            let b2 = Batch::new(&[&seq(perturbed, "b")], &[0]).unwrap();
            let s1 = model.forward_states(&b1).unwrap();
            let s2 = model.forward_states(&b2).unwrap();
            for j in 0..8 {
                let diff = (s1.at2(pos, j) - s2.at2(pos, j)).abs();
                assert!(
                    diff <= 1e-12,
                    "layers {n_layers}: leak {diff} at distance {}",
                    reach + 1
                );
            }
        }
    }

    #[test]
    fn perturbation_within_window_does_change_the_state() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f64>::init(c, &mut RngState::seed_from(7)).unwrap();
        let base: Vec<TokenId> = (0..8).map(|i| 3 + (i % 5) as TokenId).collect();
        let mut perturbed = base.clone();
        perturbed[3] = if perturbed[3] == 3 { 4 } else { 3 };
        let b1 = Batch::new(&[&seq(base, "a")], &[0]).unwrap();
        let b2 = Batch::new(&[&seq(perturbed, "b")], &[0]).unwrap();
        let s1 = model.forward_states(&b1).unwrap();
        let s2 = model.forward_states(&b2).unwrap();
        let moved: f64 = (0..8).map(|j| (s1.at2(2, j) - s2.at2(2, j)).abs()).sum();
        assert!(moved > 1e-9, "state at distance 1 should move, got {moved}");
    }

    #[test]
    fn gradients_reach_every_parameter_except_the_pad_embedding_row() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f64>::init(c, &mut RngState::seed_from(9)).unwrap();
        let s1 = seq(vec![3, 4, 5, 6], "a");
        let s2 = seq(vec![7, 3], "b");
        let batch = Batch::new(&[&s1, &s2], &[0, 1]).unwrap();
        let mut g = Graph::new();
        let mut rng = RngState::seed_from(0);
        let (leased, out) = model.forward_graph(&mut g, &batch, false, &mut rng).unwrap();
        let loss = g.cross_entropy(out.logits, batch.labels()).unwrap();
        g.backward(loss).unwrap();
        for (i, var) in leased.flat().into_iter().enumerate() {
            let grad = g.grad_or_zeros(var);
            let nonzero = grad.data().iter().any(|&v| v != 0.0);
            assert!(nonzero, "parameter {i} received no gradient");
        }
        // PAD row of the embedding gradient stays zero: padding is masked
        // out of attention and pooling.
        let emb_grad = g.grad_or_zeros(leased.flat()[0]);
        let pad_row = &emb_grad.data()[0..8];
        assert!(pad_row.iter().all(|&v| v == 0.0), "pad row got gradient");
    }

    #[test]
    fn embed_utterance_matches_forward_of_a_singleton_batch() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f64>::init(c, &mut RngState::seed_from(13)).unwrap();
        let s = seq(vec![3, 5, 4, 1, 6], "u");
        let emb = model.embed_utterance(&s).unwrap();
        assert_eq!(emb.len(), 8);
        let batch = Batch::new(&[&s], &[0]).unwrap();
        let mut rng = RngState::seed_from(0);
        let (pooled, _) = model.forward(&batch, false, &mut rng).unwrap();
        assert_eq!(emb, pooled.data().to_vec());
        // deterministic across calls
        assert_eq!(emb, model.embed_utterance(&s).unwrap());
    }

    #[test]
    fn from_parameters_round_trips_and_validates() {
        let c = tiny_config();
        let model = RhythmEncoderModel::<f32>::init(c.clone(), &mut RngState::seed_from(21)).unwrap();
        let tensors: Vec<Tensor<f32>> = model.parameters().into_iter().cloned().collect();
        let rebuilt = RhythmEncoderModel::from_parameters(c.clone(), tensors.clone()).unwrap();
        assert_eq!(model, rebuilt);

        let mut wrong = tensors.clone();
        wrong.pop();
        assert!(matches!(
            RhythmEncoderModel::from_parameters(c.clone(), wrong),
            Err(EncoderError::ParamCount { .. })
        ));
        let mut bad_shape = tensors;
        bad_shape[0] = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            RhythmEncoderModel::from_parameters(c, bad_shape),
            Err(EncoderError::ParamShape { index: 0, .. })
        ));
    }

    #[test]
    fn two_layer_encoder_passes_gradient_check() {
        for seed in [0u64, 1] {
            let err = grad_check_encoder(seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: encoder grad error {err}");
        }
    }
}
