//! Prototype-based explanations for frozen CNN classifiers.
//!
//! The crate works entirely on exported activation tensors: per-block feature maps,
//! pooled embeddings and the linear classifier. It fits class-wise k-means prototypes
//! at three locations (classifier weights, pooled embeddings, multi-depth composite
//! features), predicts with them, and produces explanation maps and gradient-free
//! attribution maps.

pub mod attribution;
pub mod encoder_explainer;
pub mod error;
pub mod eval_report;
pub mod kmeans;
pub mod kmex;
pub(crate) mod linalg;
pub mod pipeline;
pub mod render;
pub mod sem_core;
pub mod synthetic;
pub mod tensor_store;

pub use error::{Error, Result};
