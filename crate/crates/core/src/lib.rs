//! Data-side and objective-side machinery for shared-network video-text
//! pre-training.
//!
//! The crate covers the pipeline from raw captions to training signals:
//!
//! - [`tokenizer`]: vocabulary loading and greedy WordPiece tokenization.
//! - [`miner`]: offline significant-semantic vocabulary mining from
//!   POS-tagged corpora and online per-caption chosen lists.
//! - [`planner`]: deterministic masking plans (conventional and
//!   significant-only) and significant-token sampling for local matching.
//! - [`losses`] / [`mlp`]: the five objective kernels with analytic
//!   gradients and a finite-difference checker.
//! - [`encoder`]: a forward-only shared-vs-separate encoder skeleton plus
//!   parameter accounting for the two architectures.
//! - [`harness`]: a synthetic paired corpus and a toy alignment loop scored
//!   with retrieval metrics.
//!
//! Everything is deterministic under explicit seeds; artifacts carry content
//! hashes so mismatched vocabularies are rejected rather than silently mixed.

pub mod encoder;
pub mod error;
pub mod featfile;
pub mod harness;
pub mod hashing;
pub mod jsonl;
pub mod losses;
pub mod miner;
pub mod mlp;
pub mod planner;
pub mod tokenizer;

pub use error::{Error, Result};

/// Hyper-parameter defaults shared by the CLI and the harness.
pub mod defaults {
    /// Fixed caption length in tokens.
    pub const TOKEN_LEN: usize = 30;
    /// Significant-vocabulary size.
    pub const K_SS: usize = 2000;
    /// Masking rate.
    pub const MASK_RATE: f64 = 0.15;
    /// Sampled significant tokens per caption for local matching.
    pub const N_L: usize = 3;
}
