//! Bi-sequence classification: embeddings, CBOW/RNN/CNN encoders, the nineteen
//! context–target combinations, training, ranking metrics and an experiment harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

pub mod combinators;
pub mod embed;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use combinators::{enumerate_architectures, validate_spec, Combination, ContextEncoder, ModelSpec, TargetEncoder};
pub use encoders::{CellKind, Mask};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = combinators::Model<f64>;
pub type EmbeddingTable = embed::EmbeddingTable<f64>;
pub type TrainedModel = train::TrainedModel<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = combinators::Model<f32>;
