use super::linear::{axpy, dot};
use super::{softmax, Array};
use crate::{Error, Result};

/// Result of attention pooling: the pooled vector and the spatial weights
/// (kept for the backward pass).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPool {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Scaled dot-product attention of a single query over `positions` feature
/// vectors of length `channels` stored contiguously.
pub(crate) fn attend(features: &[f64], channels: usize, query: &[f64]) -> AttentionPool {
    let scale = 1.0 / (channels as f64).sqrt();
    let scores: Vec<f64> = features
        .chunks_exact(channels)
        .map(|f| dot(query, f) * scale)
        .collect();
    let weights = softmax(&scores);
    let mut output = vec![0.0; channels];
    for (f, &a) in features.chunks_exact(channels).zip(&weights) {
        axpy(a, f, &mut output);
    }
    AttentionPool { output, weights }
}

/// Adds the gradients w.r.t. the features and the query.
pub(crate) fn attend_backward(
    features: &[f64],
    channels: usize,
    query: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_features: Option<&mut [f64]>,
    grad_query: &mut [f64],
) {
    let scale = 1.0 / (channels as f64).sqrt();
    // d weight_p = grad_out . f_p ; d score_p = a_p (dw_p - sum a dw)
    let dw: Vec<f64> = features
        .chunks_exact(channels)
        .map(|f| dot(grad_out, f))
        .collect();
    let inner: f64 = weights.iter().zip(&dw).map(|(a, d)| a * d).sum();
    let dscore: Vec<f64> = weights
        .iter()
        .zip(&dw)
        .map(|(a, d)| a * (d - inner))
        .collect();
    for (f, &ds) in features.chunks_exact(channels).zip(&dscore) {
        axpy(ds * scale, f, grad_query);
    }
    if let Some(gf) = grad_features {
        for ((gp, &a), &ds) in gf.chunks_exact_mut(channels).zip(weights).zip(&dscore) {
            axpy(a, grad_out, gp);
            axpy(ds * scale, query, gp);
        }
    }
}

fn check(grid: &Array, query: &Array) -> Result<usize> {
    let c = grid.last_dim();
    if query.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "attention query length {} does not match {c} channels",
            query.len()
        )));
    }
    Ok(c)
}

/// Attention pooling of a grid (any shape whose trailing dimension is the
/// channel count) with respect to `query`: scores `q . f / sqrt(C)` over all
/// spatial positions, softmax, weighted sum of the feature vectors.
pub fn attention_pool(grid: &Array, query: &Array) -> Result<AttentionPool> {
    let c = check(grid, query)?;
    Ok(attend(grid.data(), c, query.data()))
}

/// Gradients of [`attention_pool`] w.r.t. the grid and the query.
pub fn attention_pool_backward(
    grid: &Array,
    query: &Array,
    pooled: &AttentionPool,
    grad_out: &Array,
) -> Result<(Array, Array)> {
    let c = check(grid, query)?;
    if grad_out.len() != c || pooled.weights.len() != grid.rows() {
        return Err(Error::ShapeMismatch(
            "attention gradient does not match grid".into(),
        ));
    }
    let mut grad_grid = Array::zeros(grid.shape());
    let mut grad_query = Array::zeros(query.shape());
    attend_backward(
        grid.data(),
        c,
        query.data(),
        &pooled.weights,
        grad_out.data(),
        Some(grad_grid.data_mut()),
        grad_query.data_mut(),
    );
    Ok((grad_grid, grad_query))
}
