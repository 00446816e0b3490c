//! Text-independent speaker identification from speech rhythm.
//!
//! The pipeline starts from time-aligned character transcripts, renders them
//! as frame-aligned character sequences (one token per fixed-length frame,
//! with a null token for silence), and trains a locally-masked transformer
//! encoder to predict speaker identity from those sequences. Precomputed
//! acoustic x-vectors can optionally be fused with the rhythm embeddings.
//!
//! Modules:
//! - [`facs`] — alignment parsing, vocabulary, frame-aligned encoding.
//! - [`tensor`] — dense tensors with reverse-mode autodiff and Adam.
//! - [`encoder`] — the rhythm transformer encoder.
//! - [`checkpoint`] — binary model serialization.
//! - [`training`] — splits, schedule, the training loop, run directories.
//! - [`fusion`] — x-vector tables, fusion assembly, linear baseline.
//! - [`metrics`] — confusion matrices, balanced accuracy, loss smoothing.
//! - [`synthgen`] — deterministic synthetic rhythm corpora for testing.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` for training, `f64` for gradient checking); the aliases below pin
//! the two concrete instantiations.

pub mod checkpoint;
pub mod encoder;
pub mod facs;
pub mod fusion;
pub mod metrics;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod training;
pub mod util;

pub use scalar::Scalar;
pub use tensor::rng::RngState;

/// Single-precision tensor, the training configuration.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, the gradient-checking configuration.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type RhythmEncoder32 = encoder::RhythmEncoderModel<f32>;
pub type RhythmEncoder64 = encoder::RhythmEncoderModel<f64>;
pub type FusionAssembly32 = fusion::FusionAssembly<f32>;
pub type XVectorBaseline32 = fusion::XVectorBaseline<f32>;
