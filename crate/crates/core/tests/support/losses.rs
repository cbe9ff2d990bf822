//! Loss identities on random batches.

use rand::Rng;
use roadattr_core::losses::{
    class_decomposed_ce, cross_entropy, multitask_recall_ce, recall_weights, BatchPosteriors, ClassWeights,
};
use roadattr_core::nncore::softmax;
use roadattr_core::seeded_rng;

pub fn random_batch(seed: u64) -> BatchPosteriors {
    let mut rng = seeded_rng(seed, 0x1055);
    let c = rng.random_range(2..7);
    let n = rng.random_range(1..40);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| softmax(&(0..c).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>()))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    BatchPosteriors::from_rows(&rows, labels).unwrap()
}

/// Largest deviations over one batch: (decomposition vs CE, uniform
/// normalised loss vs CE, normalised loss under weight scaling).
pub fn identity_errors(seed: u64) -> (f64, f64, f64) {
    let batch = random_batch(seed);
    let n = batch.len() as f64;
    // oracle CE straight from the posteriors
    let ce_oracle: f64 = (0..batch.len())
        .map(|i| -batch.posteriors().row(i)[batch.labels()[i]].ln())
        .sum::<f64>()
        / n;
    let decomposed: f64 = class_decomposed_ce(&batch).unwrap().iter().map(|t| t.term).sum();
    let ce = cross_entropy(&batch).unwrap().value;
    let c = batch.num_classes();
    let uniform = multitask_recall_ce(&batch, &ClassWeights::uniform(c)).unwrap().value;

    let mut rng = seeded_rng(seed, 0x5CA1E);
    let w = ClassWeights {
        weights: (0..c).map(|_| Some(rng.random_range(0.01..20.0))).collect(),
        ..ClassWeights::uniform(c)
    };
    let k = 10f64.powf(rng.random_range(-3.0..3.0));
    let base = multitask_recall_ce(&batch, &w).unwrap().value;
    let scaled = multitask_recall_ce(&batch, &w.scaled(k)).unwrap().value;
    (
        (decomposed - ce_oracle).abs().max((ce - ce_oracle).abs()),
        (uniform - ce).abs(),
        (scaled - base).abs(),
    )
}

/// Recall-balanced weight spot values: `(N/N_c = 10, R = 0)` and `R = 1`.
pub fn spot_weights() -> (f64, f64) {
    let w = recall_weights(10, &[1, 9], &[0.0, 1.0], 1e-4).unwrap();
    (w.get(0).unwrap(), w.get(1).unwrap())
}
