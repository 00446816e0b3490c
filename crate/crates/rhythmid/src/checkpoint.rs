//! Binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "RHYTHMID"
//! version  u32 LE   currently 1
//! hlen     u64 LE   header byte count
//! header   JSON     kind, configs, speaker table, vocabulary hash, shapes
//! payload  f32 LE   parameter values, contiguous, canonical order
//! ```
//!
//! The canonical parameter order is defined by each model's `parameters()`
//! (see [`crate::encoder::RhythmEncoderModel`] and
//! [`crate::fusion::FusionAssembly`]); the baseline stores `w, b`. Values
//! are always 32-bit on disk regardless of the in-memory scalar type.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, RhythmEncoderConfig, RhythmEncoderModel};
use crate::fusion::{FusionAssembly, FusionConfig, FusionError, XVectorBaseline};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RHYTHMID";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("payload holds {got} values, header implies {expected}")]
    BadPayload { got: usize, expected: usize },
    #[error("checkpoint kind is {got:?}, expected {expected:?}")]
    WrongKind {
        got: CheckpointKind,
        expected: CheckpointKind,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Rhythm,
    Fusion,
    XvectorBaseline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub encoder: Option<RhythmEncoderConfig>,
    pub fusion: Option<FusionConfig>,
    /// Baseline-only input width (fusion/rhythm carry it in their configs).
    pub xvec_dim: Option<usize>,
    /// Class labels in index order.
    pub speakers: Vec<String>,
    /// SHA-256 of the canonical vocabulary serialization, when applicable.
    pub vocab_sha256: Option<String>,
    /// Shape of every parameter tensor, in payload order.
    pub shapes: Vec<Vec<usize>>,
}

fn write_raw<W: Write, T: Scalar>(
    mut w: W,
    header: &CheckpointHeader,
    params: &[&Tensor<T>],
) -> Result<(), CheckpointError> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in params {
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_raw<R: Read>(mut r: R) -> Result<(CheckpointHeader, Vec<Tensor<f32>>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long)?;
    let hlen = u64::from_le_bytes(long) as usize;
    let mut header_bytes = vec![0u8; hlen];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(CheckpointError::BadPayload {
            got: payload.len() / 4,
            expected,
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        tensors.push(
            Tensor::new(shape.clone(), data)
                .map_err(|e| CheckpointError::BadHeader(e.to_string()))?,
        );
    }
    Ok((header, tensors))
}

fn shapes_of<T: Scalar>(params: &[&Tensor<T>]) -> Vec<Vec<usize>> {
    params.iter().map(|t| t.shape().to_vec()).collect()
}

pub fn save_rhythm<W: Write, T: Scalar>(
    w: W,
    model: &RhythmEncoderModel<T>,
    speakers: &[String],
    vocab_sha256: Option<String>,
) -> Result<(), CheckpointError> {
    let params = model.parameters();
    let header = CheckpointHeader {
        kind: CheckpointKind::Rhythm,
        encoder: Some(model.config().clone()),
        fusion: None,
        xvec_dim: None,
        speakers: speakers.to_vec(),
        vocab_sha256,
        shapes: shapes_of(&params),
    };
    write_raw(w, &header, &params)
}

pub fn load_rhythm<R: Read, T: Scalar>(
    r: R,
) -> Result<(RhythmEncoderModel<T>, CheckpointHeader), CheckpointError> {
    let (header, tensors) = read_raw(r)?;
    if header.kind != CheckpointKind::Rhythm {
        return Err(CheckpointError::WrongKind {
            got: header.kind,
            expected: CheckpointKind::Rhythm,
        });
    }
    let config = header
        .encoder
        .clone()
        .ok_or_else(|| CheckpointError::BadHeader("missing encoder config".to_string()))?;
    let tensors: Vec<Tensor<T>> = tensors.iter().map(Tensor::cast).collect();
    let model = RhythmEncoderModel::from_parameters(config, tensors)?;
    Ok((model, header))
}

pub fn save_fusion<W: Write, T: Scalar>(
    w: W,
    assembly: &FusionAssembly<T>,
    speakers: &[String],
    vocab_sha256: Option<String>,
) -> Result<(), CheckpointError> {
    let params = assembly.parameters();
    let header = CheckpointHeader {
        kind: CheckpointKind::Fusion,
        encoder: Some(assembly.rhythm().config().clone()),
        fusion: Some(assembly.config().clone()),
        xvec_dim: None,
        speakers: speakers.to_vec(),
        vocab_sha256,
        shapes: shapes_of(&params),
    };
    write_raw(w, &header, &params)
}

pub fn load_fusion<R: Read, T: Scalar>(
    r: R,
) -> Result<(FusionAssembly<T>, CheckpointHeader), CheckpointError> {
    let (header, tensors) = read_raw(r)?;
    if header.kind != CheckpointKind::Fusion {
        return Err(CheckpointError::WrongKind {
            got: header.kind,
            expected: CheckpointKind::Fusion,
        });
    }
    let encoder = header
        .encoder
        .clone()
        .ok_or_else(|| CheckpointError::BadHeader("missing encoder config".to_string()))?;
    let fusion = header
        .fusion
        .clone()
        .ok_or_else(|| CheckpointError::BadHeader("missing fusion config".to_string()))?;
    let tensors: Vec<Tensor<T>> = tensors.iter().map(Tensor::cast).collect();
    let assembly = FusionAssembly::from_parameters(encoder, fusion, tensors)?;
    Ok((assembly, header))
}

pub fn save_baseline<W: Write, T: Scalar>(
    w: W,
    head: &XVectorBaseline<T>,
    speakers: &[String],
) -> Result<(), CheckpointError> {
    let params = head.parameters();
    let header = CheckpointHeader {
        kind: CheckpointKind::XvectorBaseline,
        encoder: None,
        fusion: None,
        xvec_dim: Some(head.xvec_dim()),
        speakers: speakers.to_vec(),
        vocab_sha256: None,
        shapes: shapes_of(&params),
    };
    write_raw(w, &header, &params)
}

pub fn load_baseline<R: Read, T: Scalar>(
    r: R,
) -> Result<(XVectorBaseline<T>, CheckpointHeader), CheckpointError> {
    let (header, mut tensors) = read_raw(r)?;
    if header.kind != CheckpointKind::XvectorBaseline {
        return Err(CheckpointError::WrongKind {
            got: header.kind,
            expected: CheckpointKind::XvectorBaseline,
        });
    }
    if tensors.len() != 2 {
        return Err(CheckpointError::BadHeader(format!(
            "baseline expects 2 tensors, found {}",
            tensors.len()
        )));
    }
    let b = tensors.pop().expect("length checked");
    let w = tensors.pop().expect("length checked");
    let head = XVectorBaseline::from_parameters(w.cast(), b.cast())?;
    Ok((head, header))
}

/// Reads only the header, for kind dispatch and metadata inspection.
pub fn peek_header<R: Read>(r: R) -> Result<CheckpointHeader, CheckpointError> {
    let (header, _) = read_raw(r)?;
    Ok(header)
}
