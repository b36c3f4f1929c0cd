//! Random token grouping for vision-transformer attention.
//!
//! A stored random tensor assigns every token (per attention head) a value;
//! tokens sorted by that value in descending order are split into equal
//! groups, and attention is computed within each group ([`attention`]) or
//! each group is pooled into a single key/value token. The crate also ships
//! a dense masked-attention oracle, a small reverse-mode autodiff engine, a
//! trainable single-stage backbone and an experiment harness covering the
//! grouping ablations.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod randgroup;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorF;
