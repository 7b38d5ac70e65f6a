//! Desk-scale multilingual sequence-to-sequence training lab implementing
//! language-specific self-distillation with per-language best-checkpoint
//! teachers, distillation switches, and sample-level weighting variants.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Reserved vocabulary ids, fixed across every corpus.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
