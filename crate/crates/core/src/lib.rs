//! Speculative parallel decoding on a small byte-level transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `f32` tensors, forward kernels and a reverse-mode tape.
//! * [`backbone`] — decoder-only transformer with a KV cache and arbitrary
//!   boolean attention masks.
//! * [`heads`] — Medusa (independent) and Cerberus (sequentially tapped)
//!   decoding heads plus the depth-synchronous wavefront scheduler.
//! * [`gate`] — entropy of the last hidden state and the threshold policy.
//! * [`tree`] — path templates, candidate trees, tree masks and greedy
//!   verification.
//! * [`engine`] — the per-step decode loop.
//! * [`trainer`], [`bench`], [`data`], [`checkpoint`] — training, analysis and IO.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod gate;
pub mod heads;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};

/// Token identifier. The tokenizer is byte-level, so ids are `0..256` by default.
pub type TokenId = u32;
