//! Desk-scale generative retrieval training stack.
//!
//! Semantic-ID tokenization over a synthetic e-commerce world, a tiny
//! autoregressive generator with trie-constrained decoding, staged
//! supervised training with self-distillation, behavior-feedback policy
//! optimization, and an evaluation harness — all deterministic under a
//! single experiment seed.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{CoreError, Result};
