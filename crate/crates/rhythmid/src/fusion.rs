//! Rhythm/x-vector fusion and the x-vector-only baseline.
//!
//! X-vectors are precomputed acoustic speaker embeddings, consumed from a
//! TSV table (`dim<TAB>D` header, then `utt_id<TAB>v1<TAB>...<TAB>vD`
//! rows). In fusion mode both streams pass through linear projections, are
//! combined (concatenation by default, sum optionally) and classified by a
//! single affine head. The x-vectors stay constant during training; the
//! rhythm encoder and all linear maps receive gradients.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Batch, EncoderError, LeasedParams, RhythmEncoderModel};
use crate::scalar::Scalar;
use crate::tensor::rng::RngState;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("x-vector file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("x-vector file line {line}: expected {expected} values, found {found}")]
    DimMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate utterance id {utt_id:?} at line {line}")]
    DuplicateKey { utt_id: String, line: usize },
    #[error("non-numeric value at line {line}")]
    NonNumeric { line: usize },
    #[error("non-finite value at line {line}")]
    NonFinite { line: usize },
    #[error("vector for {utt_id:?} has {found} values, table dim is {expected}")]
    BadVector {
        utt_id: String,
        expected: usize,
        found: usize,
    },
    #[error("no x-vector for utterance {0:?}")]
    MissingUtterance(String),
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Immutable utterance-id keyed table of fixed-dimension embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct XVectorTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl XVectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&[f64]> {
        self.entries.get(utt_id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, utt_id: String, vector: Vec<f64>) -> Result<(), FusionError> {
        if vector.len() != self.dim {
            return Err(FusionError::BadVector {
                utt_id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.entries.contains_key(&utt_id) {
            return Err(FusionError::DuplicateKey { utt_id, line: 0 });
        }
        self.entries.insert(utt_id, vector);
        Ok(())
    }

    /// Stacks the vectors for `utt_ids` into a `[n, dim]` tensor, erroring
    /// on the first missing id.
    pub fn gather<T: Scalar>(&self, utt_ids: &[&str]) -> Result<Tensor<T>, FusionError> {
        let mut data = Vec::with_capacity(utt_ids.len() * self.dim);
        for &id in utt_ids {
            let v = self
                .get(id)
                .ok_or_else(|| FusionError::MissingUtterance(id.to_string()))?;
            data.extend(v.iter().map(|&x| T::of(x)));
        }
        Ok(Tensor::new(vec![utt_ids.len(), self.dim], data)?)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), FusionError> {
        writeln!(w, "dim\t{}", self.dim)?;
        for (id, v) in &self.entries {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}\t{}", id, values.join("\t"))?;
        }
        Ok(())
    }
}

/// Parses the TSV x-vector format, validating dimension, uniqueness and
/// finiteness per row.
pub fn load_xvectors<R: BufRead>(source: R) -> Result<XVectorTable, FusionError> {
    let mut lines = source.lines().enumerate();
    let (_, header) = lines.next().ok_or(FusionError::Format {
        line: 1,
        reason: "empty file, expected dim<TAB>D header".to_string(),
    })?;
    let header = header?;
    let dim: usize = match header.split_once('\t') {
        Some(("dim", value)) => value.parse().map_err(|_| FusionError::Format {
            line: 1,
            reason: format!("bad dimension {value:?}"),
        })?,
        _ => {
            return Err(FusionError::Format {
                line: 1,
                reason: "expected dim<TAB>D header".to_string(),
            })
        }
    };
    let mut table = XVectorTable::new(dim);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let utt_id = parts.next().unwrap_or_default().to_string();
        if utt_id.is_empty() {
            return Err(FusionError::Format {
                line: lineno,
                reason: "missing utterance id".to_string(),
            });
        }
        let mut vector = Vec::with_capacity(dim);
        for part in parts {
            let value: f64 = part
                .parse()
                .map_err(|_| FusionError::NonNumeric { line: lineno })?;
            if !value.is_finite() {
                return Err(FusionError::NonFinite { line: lineno });
            }
            vector.push(value);
        }
        if vector.len() != dim {
            return Err(FusionError::DimMismatch {
                line: lineno,
                expected: dim,
                found: vector.len(),
            });
        }
        if table.entries.contains_key(&utt_id) {
            return Err(FusionError::DuplicateKey {
                utt_id,
                line: lineno,
            });
        }
        table.entries.insert(utt_id, vector);
    }
    Ok(table)
}

/// How the projected streams are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub xvec_dim: usize,
    pub d_proj: usize,
    pub op: FusionOp,
}

impl FusionConfig {
    pub fn new(xvec_dim: usize) -> Self {
        Self {
            xvec_dim,
            d_proj: 128,
            op: FusionOp::Concat,
        }
    }

    /// Width of the head input after fusion.
    pub fn fused_dim(&self) -> usize {
        match self.op {
            FusionOp::Concat => 2 * self.d_proj,
            FusionOp::Sum => self.d_proj,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.xvec_dim == 0 || self.d_proj == 0 {
            return Err(FusionError::InvalidConfig(
                "xvec_dim and d_proj must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Trainable fusion model: rhythm encoder, two projections, affine head.
///
/// Parameter order: all rhythm-encoder parameters (canonical order), then
/// `proj_x_w, proj_x_b, proj_r_w, proj_r_b, head_w, head_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionAssembly<T> {
    rhythm: RhythmEncoderModel<T>,
    config: FusionConfig,
    proj_x_w: Tensor<T>,
    proj_x_b: Tensor<T>,
    proj_r_w: Tensor<T>,
    proj_r_b: Tensor<T>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

pub struct LeasedFusion {
    pub rhythm: LeasedParams,
    tail: [Var; 6],
}

impl<T: Scalar> FusionAssembly<T> {
    /// Builds around an existing (typically pretrained) rhythm encoder.
    pub fn init(
        rhythm: RhythmEncoderModel<T>,
        config: FusionConfig,
        rng: &mut RngState,
    ) -> Result<Self, FusionError> {
        config.validate()?;
        let d_model = rhythm.config().d_model;
        let n_speakers = rhythm.config().n_speakers;
        let proj_x_w = xavier(rng, config.xvec_dim, config.d_proj);
        let proj_x_b = Tensor::zeros(vec![config.d_proj]);
        let proj_r_w = xavier(rng, d_model, config.d_proj);
        let proj_r_b = Tensor::zeros(vec![config.d_proj]);
        let head_w = xavier(rng, config.fused_dim(), n_speakers);
        let head_b = Tensor::zeros(vec![n_speakers]);
        Ok(Self {
            rhythm,
            config,
            proj_x_w,
            proj_x_b,
            proj_r_w,
            proj_r_b,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn rhythm(&self) -> &RhythmEncoderModel<T> {
        &self.rhythm
    }

    pub fn n_speakers(&self) -> usize {
        self.rhythm.config().n_speakers
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = self.rhythm.parameters();
        out.extend([
            &self.proj_x_w,
            &self.proj_x_b,
            &self.proj_r_w,
            &self.proj_r_b,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.rhythm.parameters_mut();
        out.extend([
            &mut self.proj_x_w,
            &mut self.proj_x_b,
            &mut self.proj_r_w,
            &mut self.proj_r_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn from_parameters(
        rhythm_config: crate::encoder::RhythmEncoderConfig,
        fusion_config: FusionConfig,
        mut tensors: Vec<Tensor<T>>,
    ) -> Result<Self, FusionError> {
        fusion_config.validate()?;
        let rhythm_count = crate::encoder::param_count(&rhythm_config);
        if tensors.len() != rhythm_count + 6 {
            return Err(EncoderError::ParamCount {
                got: tensors.len(),
                expected: rhythm_count + 6,
            }
            .into());
        }
        let tail: Vec<Tensor<T>> = tensors.split_off(rhythm_count);
        let rhythm = RhythmEncoderModel::from_parameters(rhythm_config, tensors)?;
        let mut shell = Self::init(rhythm, fusion_config, &mut RngState::seed_from(0))?;
        let mut it = tail.into_iter();
        for (index, slot) in [
            &mut shell.proj_x_w,
            &mut shell.proj_x_b,
            &mut shell.proj_r_w,
            &mut shell.proj_r_b,
            &mut shell.head_w,
            &mut shell.head_b,
        ]
        .into_iter()
        .enumerate()
        {
            let t = it.next().expect("count checked");
            if t.shape() != slot.shape() {
                return Err(EncoderError::ParamShape {
                    index: rhythm_count + index,
                    got: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                }
                .into());
            }
            *slot = t;
        }
        Ok(shell)
    }

    pub fn lease(&self, g: &mut Graph<T>) -> LeasedFusion {
        let rhythm = self.rhythm.lease(g);
        let tail = [
            g.param(self.proj_x_w.clone()),
            g.param(self.proj_x_b.clone()),
            g.param(self.proj_r_w.clone()),
            g.param(self.proj_r_b.clone()),
            g.param(self.head_w.clone()),
            g.param(self.head_b.clone()),
        ];
        LeasedFusion { rhythm, tail }
    }

    /// Records the fused forward pass. `xvecs` rows must align with the
    /// batch rows; they enter the graph as constants, so only the rhythm
    /// encoder, projections and head receive gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_leased(
        g: &mut Graph<T>,
        assembly_config: &FusionConfig,
        rhythm_config: &crate::encoder::RhythmEncoderConfig,
        leased: &LeasedFusion,
        batch: &Batch,
        xvecs: &Tensor<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var, FusionError> {
        let (rows, dim) = xvecs.dims2()?;
        if rows != batch.size() || dim != assembly_config.xvec_dim {
            return Err(TensorError::ShapeMismatch {
                op: "fused_forward",
                lhs: vec![batch.size(), assembly_config.xvec_dim],
                rhs: vec![rows, dim],
            }
            .into());
        }
        let rhythm_out = RhythmEncoderModel::<T>::forward_leased(
            g,
            rhythm_config,
            &leased.rhythm,
            batch,
            training,
            rng,
        )?;
        let [pxw, pxb, prw, prb, hw, hb] = leased.tail;
        let xv = g.constant(xvecs.clone());
        let px = g.matmul(xv, pxw)?;
        let px = g.add_bias(px, pxb)?;
        let pr = g.matmul(rhythm_out.pooled, prw)?;
        let pr = g.add_bias(pr, prb)?;
        let fused = match assembly_config.op {
            FusionOp::Concat => g.concat_cols(&[px, pr])?,
            FusionOp::Sum => g.add(px, pr)?,
        };
        let logits = g.matmul(fused, hw)?;
        Ok(g.add_bias(logits, hb)?)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        xvecs: &Tensor<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(LeasedFusion, Var), FusionError> {
        let leased = self.lease(g);
        let logits = Self::forward_leased(
            g,
            &self.config,
            self.rhythm.config(),
            &leased,
            batch,
            xvecs,
            training,
            rng,
        )?;
        Ok((leased, logits))
    }

    /// Fused logits as values, `[batch, n_speakers]`.
    pub fn fused_forward(
        &self,
        batch: &Batch,
        xvecs: &Tensor<T>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Tensor<T>, FusionError> {
        let mut g = Graph::new();
        let (_, logits) = self.forward_graph(&mut g, batch, xvecs, training, rng)?;
        Ok(g.value(logits).clone())
    }

    /// Zeroes the rhythm projection, leaving logits a function of the
    /// x-vector stream alone. Test hook for stream isolation.
    pub fn zero_rhythm_projection(&mut self) {
        self.proj_r_w = Tensor::zeros(self.proj_r_w.shape().to_vec());
        self.proj_r_b = Tensor::zeros(self.proj_r_b.shape().to_vec());
    }

    /// Zeroes the x-vector projection, the mirror-image hook.
    pub fn zero_xvec_projection(&mut self) {
        self.proj_x_w = Tensor::zeros(self.proj_x_w.shape().to_vec());
        self.proj_x_b = Tensor::zeros(self.proj_x_b.shape().to_vec());
    }

    #[cfg(test)]
    fn head_shape(&self) -> &[usize] {
        self.head_w.shape()
    }

    #[cfg(test)]
    fn proj_shapes(&self) -> (&[usize], &[usize]) {
        (self.proj_x_w.shape(), self.proj_r_w.shape())
    }
}

impl LeasedFusion {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.rhythm.flat();
        out.extend_from_slice(&self.tail);
        out
    }

    pub fn tail_vars(&self) -> &[Var; 6] {
        &self.tail
    }
}

/// Linear classifier over x-vectors alone.
///
/// Parameter order: `w, b`.
#[derive(Clone, Debug, PartialEq)]
pub struct XVectorBaseline<T> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> XVectorBaseline<T> {
    pub fn init(xvec_dim: usize, n_speakers: usize, rng: &mut RngState) -> Self {
        Self {
            w: xavier(rng, xvec_dim, n_speakers),
            b: Tensor::zeros(vec![n_speakers]),
        }
    }

    pub fn from_parameters(w: Tensor<T>, b: Tensor<T>) -> Result<Self, FusionError> {
        let (din, dout) = w.dims2()?;
        if b.shape() != [dout] {
            return Err(TensorError::ShapeMismatch {
                op: "baseline_head",
                lhs: vec![din, dout],
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { w, b })
    }

    pub fn xvec_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_speakers(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.w, &self.b]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        xvecs: &Tensor<T>,
    ) -> Result<(Vec<Var>, Var), FusionError> {
        let w = g.param(self.w.clone());
        let b = g.param(self.b.clone());
        let xv = g.constant(xvecs.clone());
        let logits = g.matmul(xv, w)?;
        let logits = g.add_bias(logits, b)?;
        Ok((vec![w, b], logits))
    }
}

/// Baseline logits as values: one affine map, `[batch, n_speakers]`.
pub fn xvector_baseline_forward<T: Scalar>(
    head: &XVectorBaseline<T>,
    xvecs: &Tensor<T>,
) -> Result<Tensor<T>, FusionError> {
    let mut g = Graph::new();
    let (_, logits) = head.forward_graph(&mut g, xvecs)?;
    Ok(g.value(logits).clone())
}

/// Every utterance must resolve in the x-vector table; returns the sorted
/// missing ids otherwise.
pub fn check_alignment(utt_ids: &[&str], table: &XVectorTable) -> Result<(), Vec<String>> {
    let missing: Vec<String> = utt_ids
        .iter()
        .filter(|id| table.get(id).is_none())
        .map(|id| id.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(missing)
    }
}

fn xavier<T: Scalar>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.uniform(-limit, limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::RhythmEncoderConfig;
    use crate::facs::FacsSequence;

    fn tiny_rhythm(seed: u64) -> RhythmEncoderModel<f64> {
        let mut c = RhythmEncoderConfig::new(8, 3);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_layers = 1;
        c.ffn_dim = 16;
        c.max_len = 16;
        c.dropout_rate = 0.1;
        RhythmEncoderModel::init(c, &mut RngState::seed_from(seed)).unwrap()
    }

    fn tiny_assembly(seed: u64) -> FusionAssembly<f64> {
        let rhythm = tiny_rhythm(seed);
        let mut fc = FusionConfig::new(6);
        fc.d_proj = 4;
        FusionAssembly::init(rhythm, fc, &mut RngState::seed_from(seed + 1)).unwrap()
    }

    fn seq(ids: Vec<u32>, utt: &str) -> FacsSequence {
        FacsSequence {
            token_ids: ids,
            frame_ms: 20,
            utt_id: utt.to_string(),
            speaker_id: "spk".to_string(),
        }
    }

    // ---- x-vector table ----------------------------------------------------

    #[test]
    fn loads_a_well_formed_table() {
        let text = "dim\t4\nu1\t1.0\t2.0\t3.0\t4.0\nu2\t0.5\t-0.5\t0\t1e-3\nu3\t1\t2\t3\t4\n";
        let table = load_xvectors(text.as_bytes()).unwrap();
        assert_eq!(table.dim(), 4);
        assert_eq!(table.len(), 3);
        assert_eq!(table.get("u2").unwrap()[3], 1e-3);
        assert!(table.get("nope").is_none());
    }

    #[test]
    fn empty_body_is_a_valid_empty_table() {
        let table = load_xvectors("dim\t16\n".as_bytes()).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.dim(), 16);
    }

    #[test]
    fn short_row_reports_its_line_number() {
        let text = "dim\t4\nu1\t1\t2\t3\t4\nu2\t1\t2\t3\n";
        match load_xvectors(text.as_bytes()).unwrap_err() {
            FusionError::DimMismatch {
                line,
                expected,
                found,
            } => {
                assert_eq!((line, expected, found), (3, 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_bad_values_are_rejected() {
        let dup = "dim\t2\nu1\t1\t2\nu1\t3\t4\n";
        assert!(matches!(
            load_xvectors(dup.as_bytes()),
            Err(FusionError::DuplicateKey { line: 3, .. })
        ));
        let text = "dim\t2\nu1\tx\t2\n";
        assert!(matches!(
            load_xvectors(text.as_bytes()),
            Err(FusionError::NonNumeric { line: 2 })
        ));
        let inf = "dim\t2\nu1\tinf\t2\n";
        assert!(matches!(
            load_xvectors(inf.as_bytes()),
            Err(FusionError::NonFinite { line: 2 })
        ));
        let nohdr = "u1\t1\t2\n";
        assert!(matches!(
            load_xvectors(nohdr.as_bytes()),
            Err(FusionError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn table_save_load_round_trips() {
        let mut table = XVectorTable::new(3);
        table
            .insert("a".to_string(), vec![0.25, -1.5, 3.0])
            .unwrap();
        table.insert("b".to_string(), vec![1.0, 2.0, 4.5]).unwrap();
        let mut buf = Vec::new();
        table.save(&mut buf).unwrap();
        let back = load_xvectors(buf.as_slice()).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn gather_errors_name_the_missing_utterance() {
        let mut table = XVectorTable::new(2);
        table.insert("a".to_string(), vec![1.0, 2.0]).unwrap();
        let got = table.gather::<f64>(&["a", "ghost"]);
        assert!(matches!(
            got,
            Err(FusionError::MissingUtterance(id)) if id == "ghost"
        ));
        let t = table.gather::<f32>(&["a"]).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
    }

    #[test]
    fn check_alignment_lists_every_missing_id() {
        let mut table = XVectorTable::new(1);
        table.insert("u2".to_string(), vec![0.0]).unwrap();
        let err = check_alignment(&["u1", "u2", "u3"], &table).unwrap_err();
        assert_eq!(err, vec!["u1".to_string(), "u3".to_string()]);
        assert!(check_alignment(&["u2"], &table).is_ok());
    }

    // ---- fused forward -------------------------------------------------------

    #[test]
    fn head_input_width_follows_the_fusion_operator() {
        let mut fc = FusionConfig::new(512);
        fc.d_proj = 128;
        assert_eq!(fc.fused_dim(), 256);
        fc.op = FusionOp::Sum;
        assert_eq!(fc.fused_dim(), 128);

        let assembly = tiny_assembly(3);
        assert_eq!(assembly.head_shape(), &[8, 3]); // 2*d_proj x speakers
        let (px, pr) = assembly.proj_shapes();
        assert_eq!(px, &[6, 4]);
        assert_eq!(pr, &[8, 4]);
    }

    #[test]
    fn fused_logits_have_batch_by_speaker_shape() {
        let assembly = tiny_assembly(5);
        let s1 = seq(vec![3, 4, 5], "u1");
        let s2 = seq(vec![6, 7], "u2");
        let batch = Batch::new(&[&s1, &s2], &[0, 1]).unwrap();
        let xv = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut rng = RngState::seed_from(0);
        let logits = assembly
            .fused_forward(&batch, &xv, false, &mut rng)
            .unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
    }

    #[test]
    fn xvec_row_count_must_match_batch() {
        let assembly = tiny_assembly(5);
        let s1 = seq(vec![3, 4, 5], "u1");
        let batch = Batch::new(&[&s1], &[0]).unwrap();
        let xv = Tensor::<f64>::zeros(vec![2, 6]);
        let mut rng = RngState::seed_from(0);
        assert!(assembly
            .fused_forward(&batch, &xv, false, &mut rng)
            .is_err());
    }

    #[test]
    fn zero_rhythm_projection_isolates_the_xvector_stream() {
        let mut assembly = tiny_assembly(7);
        assembly.zero_rhythm_projection();
        let xv = Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.9, 0.0, 1.1, -0.7]).unwrap();
        let mut rng = RngState::seed_from(0);
        let a = assembly
            .fused_forward(
                &Batch::new(&[&seq(vec![3, 4, 5], "u")], &[0]).unwrap(),
                &xv,
                false,
                &mut rng,
            )
            .unwrap();
        let b = assembly
            .fused_forward(
                &Batch::new(&[&seq(vec![7, 7, 3, 3, 1], "u")], &[0]).unwrap(),
                &xv,
                false,
                &mut rng,
            )
            .unwrap();
        assert_eq!(a, b, "logits moved under a FACS perturbation");
    }

    #[test]
    fn zero_xvec_projection_isolates_the_rhythm_stream() {
        let mut assembly = tiny_assembly(7);
        assembly.zero_xvec_projection();
        let batch = Batch::new(&[&seq(vec![3, 4, 5], "u")], &[0]).unwrap();
        let xv_a = Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.9, 0.0, 1.1, -0.7]).unwrap();
        let xv_b = Tensor::new(vec![1, 6], vec![9.0, 9.0, 9.0, -9.0, 0.0, 2.0]).unwrap();
        let mut rng = RngState::seed_from(0);
        let a = assembly
            .fused_forward(&batch, &xv_a, false, &mut rng)
            .unwrap();
        let b = assembly
            .fused_forward(&batch, &xv_b, false, &mut rng)
            .unwrap();
        assert_eq!(a, b, "logits moved under an x-vector perturbation");
    }

    #[test]
    fn gradient_reaches_the_rhythm_embedding_table() {
        let assembly = tiny_assembly(11);
        let s1 = seq(vec![3, 4, 5, 6], "u1");
        let batch = Batch::new(&[&s1], &[2]).unwrap();
        let xv = Tensor::new(vec![1, 6], vec![0.5; 6]).unwrap();
        let mut g = Graph::new();
        let mut rng = RngState::seed_from(0);
        let (leased, logits) = assembly
            .forward_graph(&mut g, &batch, &xv, false, &mut rng)
            .unwrap();
        let loss = g.cross_entropy(logits, batch.labels()).unwrap();
        g.backward(loss).unwrap();
        let emb_grad = g.grad_or_zeros(leased.rhythm.flat()[0]);
        assert!(
            emb_grad.data().iter().any(|&v| v != 0.0),
            "embedding table received no gradient"
        );
        // both projections receive gradients too
        for var in leased.tail {
            assert!(g.grad_or_zeros(var).data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn one_optimization_step_moves_both_projections_and_the_encoder() {
        use crate::tensor::{adam_step, AdamConfig, AdamState};

        let mut assembly = tiny_assembly(17);
        let before: Vec<Tensor<f64>> = assembly.parameters().into_iter().cloned().collect();
        let batch = Batch::new(&[&seq(vec![3, 4, 5, 6], "u")], &[1]).unwrap();
        let xv = Tensor::new(vec![1, 6], vec![0.4, -0.1, 0.8, 0.2, -0.5, 0.9]).unwrap();
        let xv_before = xv.clone();

        let mut g = Graph::new();
        let mut rng = RngState::seed_from(0);
        let (leased, logits) = assembly
            .forward_graph(&mut g, &batch, &xv, true, &mut rng)
            .unwrap();
        let loss = g.cross_entropy(logits, batch.labels()).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Tensor<f64>> = leased.flat().iter().map(|&v| g.grad_or_zeros(v)).collect();
        let mut state = AdamState::new(&assembly.parameters());
        let mut params = assembly.parameters_mut();
        adam_step(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default()).unwrap();

        let after = assembly.parameters();
        let n = after.len();
        // both projection matrices moved (tail order: pxw pxb prw prb hw hb)
        assert_ne!(before[n - 6], *after[n - 6], "x projection frozen");
        assert_ne!(before[n - 4], *after[n - 4], "rhythm projection frozen");
        // at least one rhythm-encoder tensor moved
        let rhythm_moved = before[..n - 6]
            .iter()
            .zip(&after[..n - 6])
            .any(|(b, a)| b != *a);
        assert!(rhythm_moved, "rhythm encoder frozen in fusion mode");
        // the x-vector input is a constant, never written
        assert_eq!(xv, xv_before);
    }

    #[test]
    fn fusion_parameters_round_trip() {
        let assembly = tiny_assembly(13);
        let tensors: Vec<Tensor<f64>> = assembly.parameters().into_iter().cloned().collect();
        let rebuilt = FusionAssembly::from_parameters(
            assembly.rhythm().config().clone(),
            assembly.config().clone(),
            tensors,
        )
        .unwrap();
        assert_eq!(assembly, rebuilt);
    }

    // ---- baseline -------------------------------------------------------------

    #[test]
    fn identity_like_head_separates_two_classes() {
        // 2-dim inputs, weight = identity: argmax matches the hot coordinate.
        let head = XVectorBaseline::from_parameters(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let xv = Tensor::new(vec![2, 2], vec![5.0, -1.0, -2.0, 4.0]).unwrap();
        let logits = xvector_baseline_forward(&head, &xv).unwrap();
        assert_eq!(crate::metrics::argmax(logits.row(0)), 0);
        assert_eq!(crate::metrics::argmax(logits.row(1)), 1);
    }

    #[test]
    fn baseline_shapes_follow_the_head() {
        let head = XVectorBaseline::<f32>::init(6, 4, &mut RngState::seed_from(2));
        assert_eq!(head.xvec_dim(), 6);
        assert_eq!(head.n_speakers(), 4);
        let xv = Tensor::zeros(vec![5, 6]);
        let logits = xvector_baseline_forward(&head, &xv).unwrap();
        assert_eq!(logits.shape(), &[5, 4]);
    }

    #[test]
    fn baseline_rejects_mismatched_dimensions() {
        let head = XVectorBaseline::<f32>::init(6, 4, &mut RngState::seed_from(2));
        let xv = Tensor::zeros(vec![5, 7]);
        assert!(xvector_baseline_forward(&head, &xv).is_err());
    }
}
