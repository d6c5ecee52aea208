//! Image-conditioned question generation.
//!
//! The crate covers the whole pipeline: corpus ingestion and synthetic corpora,
//! an encoder that fuses an image feature vector with keyword embeddings into
//! the initial recurrent state, a single-layer LSTM decoder with hand-written
//! backpropagation, a deterministic trainer, greedy / beam / diverse-beam
//! decoding, and corpus-level text metrics.
//!
//! Model math is generic over [`Scalar`] (`f32` or `f64`). Training and
//! checkpoints use `f64`; the aliases below name the common instantiations.

pub mod corpus;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod grad_check;
pub mod metrics;
pub mod scalar;
pub mod seq_model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision model, as used by the trainer and checkpoints.
pub type Model64 = seq_model::Model<f64>;
/// Single-precision model, e.g. for lighter-weight inference.
pub type Model32 = seq_model::Model<f32>;
pub type Hypothesis64 = decoding::Hypothesis<f64>;
pub type State64 = seq_model::State<f64>;
pub type Matrix64 = tensor::Matrix<f64>;
