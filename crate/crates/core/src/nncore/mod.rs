//! Minimal differentiable numeric kernel.
//!
//! Every operation comes as a forward function plus an explicit backward
//! function that accumulates into [`Parameter`] gradients. Models compose
//! these by hand; there is no tape. Training math is done in `f64`.

mod array;
pub(crate) mod attention;
pub mod checkpoint;
mod embedding;
pub mod gradcheck;
pub(crate) mod linear;
mod lstm;
mod param;
mod softmax;
mod spp;

pub use array::Array;
pub use attention::{attention_pool, attention_pool_backward, AttentionPool};
pub use embedding::{embedding_dim, embedding_lookup, Embedding};
pub use linear::{linear, linear_backward, Linear, LinearGrads};
pub use lstm::{lstm_step, LstmCache, LstmCell};
pub use param::{Module, Parameter};
pub use softmax::{argmax, softmax, softmax_backward};
pub use spp::{spp_pool, spp_pool_backward, SppPlan, DEFAULT_SPP_GRIDS};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
