//! Domain-specific prompt learning for frozen vision-language encoders.
//!
//! Quaternion layers fuse projected domain-model features with learnable
//! language context; the fused context and quaternion-generated vision
//! prompts are propagated layer by layer through frozen toy encoders, and
//! classification scores images against class text embeddings by cosine
//! similarity with a temperature-scaled softmax.

pub mod adapter;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod format;
pub mod grad;
pub mod learn;
pub mod qnum;

pub use error::{Error, Result};
