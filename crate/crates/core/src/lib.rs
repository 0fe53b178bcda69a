//! Core library: tensors with reverse-mode differentiation, a compact
//! encoder-decoder translation model, token-level contrastive losses,
//! synthetic corpus generation, training, decoding, and the evaluation
//! and embedding-geometry diagnostics.

pub mod contrastive;
pub mod corpus;
pub mod decode;
pub mod geometry;
pub mod model;
pub mod error;
pub mod eval;
pub mod rng;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{RngStream, StreamPurpose};
pub use tensor::Tensor;
