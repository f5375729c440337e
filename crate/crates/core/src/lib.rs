//! Network-aware tokenization of functional-connectivity (FC) matrices for
//! masked-autoencoder pretraining, with the downstream evaluation protocol
//! used to score the learned representations.
//!
//! The crate is organised bottom-up:
//!
//! * [`fc`]: FC matrices, parcellations, network-pair patch layouts and file IO.
//! * [`tokenizers`]: shared linear, patch-specific linear and bilinear
//!   (Khatri–Rao) patch embeddings with matching decoders.
//! * [`nn`]: a small dense reverse-mode autodiff engine, transformer blocks,
//!   AdamW and the warmup-cosine schedule.
//! * [`mae`]: the masked autoencoder: masking, pretraining, checkpoints, encoding.
//! * [`synth`]: synthetic cohorts with planted network structure.
//! * [`eval`]: confound residualization, stratified CV, kernel ridge
//!   regression, bootstrap and permutation statistics.
//! * [`cli`]: experiment orchestration behind the `fcmae` binary.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fc;
pub mod mae;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tokenizers;

pub use error::{Error, Result};
