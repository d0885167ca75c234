//! Visual storytelling with masked-slot imagination.
//!
//! A photo story is a short sequence of feature vectors (one per photo slot)
//! paired with one sentence per slot. During training some slots are hidden
//! (zeroed) on a curriculum schedule; an imagining stage reconstructs context
//! for the hidden slots from their neighbours, a telling stage re-reads the
//! full sequence, and a GRU decoder emits one sentence per slot. Everything —
//! reverse-mode autodiff, layers, Adam, beam search, metrics — is implemented
//! here from scratch on top of `std`, generic over `f32`/`f64`.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variant;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tape::Tape;
pub use tensor::Tensor;
