//! Multi-task classification of per-segment road attributes under extreme
//! class imbalance.
//!
//! The crate is organised as a two-stage pipeline:
//!
//! - [`localmodel`]: a multi-task recognition model over pooled feature grids
//!   (spatial pyramid pooling plus per-attribute attention pooling), trained
//!   with one of the losses in [`losses`].
//! - [`seqmodel`]: per-attribute bidirectional LSTM enhancers that correct the
//!   local logits using a 21-segment window.
//!
//! [`dataset`] and [`synthgen`] provide the data model and a synthetic data
//! generator, [`trainer`] the optimisation loops, and [`eval`] the metrics and
//! temporal diagnostics. [`nncore`] holds the small differentiable kernel the
//! two models are built from.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod localmodel;
pub mod losses;
pub mod nncore;
pub mod pipeline;
pub mod seqmodel;
pub mod stream;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a `(seed, stream)` pair. All randomness in the
/// crate flows through this.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
