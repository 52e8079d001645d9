//! Desk-scale toolkit for slimming decoder-only transformers by cutting off
//! their top layers and fine-tuning the remainder with prompts.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`tensor`] / [`autodiff`]: dense f32 tensors and a tape-based
//!   reverse-mode differentiation engine covering every op the model needs.
//! - [`model`]: the decoder stack (embeddings, pre-norm blocks, LM or
//!   classification head).
//! - [`surgery`]: top-layer dropping and exact parameter accounting.
//! - [`vocab`] / [`data`]: tokenization, dataset ingestion, few-shot
//!   sampling, and a synthetic task generator for desk-scale runs.
//! - [`prompting`]: templates, prompt assembly, and label-word scoring.
//! - [`training`]: AdamW, the three fine-tuning paradigms, early stopping.
//! - [`experiment`]: seed-averaged grids and table/plot emission.
//! - [`checkpoint`]: the LSLM checkpoint format and tensor-archive import.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod model;
pub mod prompting;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use autodiff::{Graph, NodeId, Parameter};
pub use error::{Error, Result};
pub use model::{HeadType, ModelConfig, TransformerModel};
pub use tensor::Tensor;
