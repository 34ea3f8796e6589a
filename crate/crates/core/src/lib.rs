//! Autoregressive triangle-mesh generation with subsequence-partitioned
//! decoding over a hierarchy of compact latent spaces.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh`]: triangle meshes, OBJ I/O, normalization, quantization,
//!   surface sampling, synthetic shapes and corruption.
//! - [`tokenizer`]: mesh <-> token sequence conversion (flat and half-edge
//!   schemes) and subsequence partitioning.
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape, gradient
//!   checking, Adam and parameter checkpoints.
//! - [`model`]: the latent extractor, latent autoregressive block, the
//!   query-driven decoding blocks, loss and training loop.
//! - [`engine`]: hierarchy construction plus serial and batched-pathway
//!   decoding.
//! - [`eval`]: geometric metrics, analytic cost model and throughput bench.
//! - [`config`]: JSON run configuration shared by the CLI.

pub mod config;
pub mod engine;
pub mod eval;
pub mod mesh;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use mesh::Mesh;
pub use tokenizer::{Scheme, TokenSequence};
