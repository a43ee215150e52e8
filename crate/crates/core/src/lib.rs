//! Image-level anomaly detection on a frozen hybrid conv/transformer
//! encoder.
//!
//! An image is preprocessed and encoded into a feature map
//! ([`encoder::encode`]), pooled into an embedding
//! ([`encoder::pool_embedding`]), and scored by a small fully connected head
//! ([`head::head_forward`]) trained with class-weighted binary
//! cross-entropy ([`trainer::train_head`]). Weights live in a simple
//! tensor container ([`checkpoint`]).

pub mod checkpoint;
pub mod dataset;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod ops;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
