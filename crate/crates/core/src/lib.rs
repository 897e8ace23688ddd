//! Concept-based explainable image representations.
//!
//! Starting from precomputed backbone features and vision-language
//! embeddings, the pipeline filters a concept pool, trains a linear concept
//! bottleneck, compresses concept vectors with a small VAE, evaluates the
//! latents by clustering and linear probing, and attributes each latent back
//! to named concepts with integrated gradients.

pub mod artifact;
pub mod attribution;
pub mod cbl;
pub mod concept_pool;
pub mod config;
pub mod embedding_store;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod vae;

pub use error::{Error, Result};
pub use numerics::Matrix;
