//! Cross-entropy variants for imbalanced multi-task training.
//!
//! - plain cross-entropy: `-(1/N) sum_n ln P_n^{y_n}`
//! - its per-class decomposition `sum_c (N_c/N) (-ln geomean_c)`
//! - inverse-frequency weights `w_c = N / N_c`
//! - recall-balanced weights `w_c = (N / N_c)(1 - R_c) + eps`
//! - weight-normalised loss `-sum_n w_{y_n} ln P_n^{y_n} / sum_n w_{y_n}`

use serde::{Deserialize, Serialize};

use crate::nncore::Array;
use crate::{Error, Result};

/// Posteriors are clamped to this floor before taking logs.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Default `eps` of the recall-balanced weights.
pub const RECALL_EPS: f64 = 1e-4;

/// Predicted posteriors `[N, C]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPosteriors {
    posteriors: Array,
    labels: Vec<usize>,
}

impl BatchPosteriors {
    pub fn new(posteriors: Array, labels: Vec<usize>) -> Result<Self> {
        if posteriors.rank() != 2 || posteriors.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "posteriors {:?} do not match {} labels",
                posteriors.shape(),
                labels.len()
            )));
        }
        let c = posteriors.shape()[1];
        for (n, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::IndexOutOfRange { index: y, len: c });
            }
            let sum: f64 = posteriors.row(n).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("posterior row {n} sums to {sum}")));
            }
        }
        Ok(Self { posteriors, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flatten().copied().collect();
        Self::new(Array::from_vec(&[rows.len(), c], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.posteriors.shape()[1]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn posteriors(&self) -> &Array {
        &self.posteriors
    }

    pub fn correct(&self, n: usize) -> f64 {
        self.posteriors.row(n)[self.labels[n]]
    }

    /// `-ln P_n^{y_n}` for every example.
    pub fn example_terms(&self) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|n| {
                let p = self.correct(n);
                if !(p > 0.0) {
                    return Err(Error::Numeric(format!(
                        "correct-class posterior of example {n} is {p}"
                    )));
                }
                Ok(-p.max(POSTERIOR_FLOOR).ln())
            })
            .collect()
    }
}

/// Plain cross-entropy value together with the per-example terms.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub per_example: Vec<f64>,
}

pub fn cross_entropy(batch: &BatchPosteriors) -> Result<CrossEntropy> {
    if batch.is_empty() {
        return Err(Error::Empty("cross_entropy of an empty batch".into()));
    }
    let per_example = batch.example_terms()?;
    let value = per_example.iter().sum::<f64>() / batch.len() as f64;
    Ok(CrossEntropy { value, per_example })
}

/// One class's share of the cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTerm {
    pub class: usize,
    pub count: usize,
    /// Geometric mean of the correct-class posteriors of this class.
    pub geometric_mean: f64,
    /// `(N_c / N) * (-ln geometric_mean)`
    pub term: f64,
}

/// Per-class decomposition of the cross-entropy. Only classes present in the
/// batch get a term; the terms sum to [`cross_entropy`].
pub fn class_decomposed_ce(batch: &BatchPosteriors) -> Result<Vec<ClassTerm>> {
    let terms = cross_entropy(batch)?.per_example;
    let c = batch.num_classes();
    let mut counts = vec![0usize; c];
    let mut sums = vec![0.0f64; c];
    for (&y, t) in batch.labels().iter().zip(&terms) {
        counts[y] += 1;
        sums[y] += t;
    }
    let n = batch.len() as f64;
    Ok((0..c)
        .filter(|&k| counts[k] > 0)
        .map(|k| {
            let neg_log_geo = sums[k] / counts[k] as f64;
            ClassTerm {
                class: k,
                count: counts[k],
                geometric_mean: (-neg_log_geo).exp(),
                term: counts[k] as f64 / n * neg_log_geo,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Uniform,
    InverseFrequency,
    RecallBalanced,
}

/// Inputs a recall-balanced table was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallInputs {
    pub total: usize,
    pub counts: Vec<usize>,
    pub recall: Vec<f64>,
    pub eps: f64,
}

/// Per-class loss weights for one epoch. Classes without training examples
/// have no weight (`None`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<Option<f64>>,
    pub epoch: usize,
    pub source: WeightSource,
    pub inputs: Option<RecallInputs>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![Some(1.0); num_classes],
            epoch: 0,
            source: WeightSource::Uniform,
            inputs: None,
        }
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.weights.get(class).copied().flatten()
    }

    /// Every weight multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.map(|v| v * k)).collect(),
            ..self.clone()
        }
    }
}

/// `w_c = N / N_c`; classes with `N_c = 0` are excluded.
pub fn ifw_weights(total: usize, counts: &[usize]) -> ClassWeights {
    ClassWeights {
        weights: counts
            .iter()
            .map(|&nc| (nc > 0).then(|| total as f64 / nc as f64))
            .collect(),
        epoch: 0,
        source: WeightSource::InverseFrequency,
        inputs: None,
    }
}

/// `w_c = (N / N_c)(1 - R_c) + eps`; classes with `N_c = 0` are excluded.
pub fn recall_weights(total: usize, counts: &[usize], recall: &[f64], eps: f64) -> Result<ClassWeights> {
    if counts.len() != recall.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} class counts but {} recalls",
            counts.len(),
            recall.len()
        )));
    }
    if let Some(r) = recall.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Numeric(format!("recall {r} outside [0, 1]")));
    }
    Ok(ClassWeights {
        weights: counts
            .iter()
            .zip(recall)
            .map(|(&nc, &r)| (nc > 0).then(|| total as f64 / nc as f64 * (1.0 - r) + eps))
            .collect(),
        epoch: 0,
        source: WeightSource::RecallBalanced,
        inputs: Some(RecallInputs {
            total,
            counts: counts.to_vec(),
            recall: recall.to_vec(),
            eps,
        }),
    })
}

/// How the weighted sum of example terms is normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the number of examples.
    BatchSize,
    /// Divide by the sum of the example weights.
    WeightSum,
}

/// Loss value and its gradient w.r.t. the posteriors (`[N, C]`).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedLoss {
    pub value: f64,
    pub grad: Array,
}

/// `-sum_n w_{y_n} ln P_n^{y_n} / Z` with `Z` chosen by `norm`.
pub fn weighted_ce(batch: &BatchPosteriors, weights: &ClassWeights, norm: Normalization) -> Result<WeightedLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("weighted cross-entropy of an empty batch".into()));
    }
    let terms = batch.example_terms()?;
    let w: Vec<f64> = batch
        .labels()
        .iter()
        .map(|&y| {
            weights
                .get(y)
                .ok_or_else(|| Error::Numeric(format!("class {y} has no loss weight")))
        })
        .collect::<Result<_>>()?;
    let z = match norm {
        Normalization::BatchSize => batch.len() as f64,
        Normalization::WeightSum => w.iter().sum(),
    };
    if !(z > 0.0) {
        return Err(Error::Numeric(format!("loss normaliser is {z}")));
    }
    let value = w.iter().zip(&terms).map(|(wi, t)| wi * t).sum::<f64>() / z;
    let mut grad = Array::zeros(batch.posteriors().shape());
    for (n, &y) in batch.labels().iter().enumerate() {
        let p = batch.correct(n).max(POSTERIOR_FLOOR);
        grad.row_mut(n)[y] = -w[n] / (p * z);
    }
    Ok(WeightedLoss { value, grad })
}

/// Recall-weighted multi-task loss: weighted cross-entropy normalised by the
/// sum of the example weights.
pub fn multitask_recall_ce(batch: &BatchPosteriors, weights: &ClassWeights) -> Result<WeightedLoss> {
    weighted_ce(batch, weights, Normalization::WeightSum)
}

/// Inverse-frequency weighted cross-entropy, normalised by the batch size.
pub fn ifw_ce(batch: &BatchPosteriors, weights: &ClassWeights) -> Result<WeightedLoss> {
    weighted_ce(batch, weights, Normalization::BatchSize)
}

/// Total multi-task loss: the mean of the per-attribute losses.
pub fn multitask_total_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Empty("no attribute losses".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch_with_correct(correct: &[f64], labels: &[usize], c: usize) -> BatchPosteriors {
        let rows: Vec<Vec<f64>> = correct
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let rest = (1.0 - p) / (c - 1) as f64;
                (0..c).map(|k| if k == y { p } else { rest }).collect()
            })
            .collect();
        BatchPosteriors::from_rows(&rows, labels.to_vec()).unwrap()
    }

    #[test]
    fn ce_values() {
        let one_hot = batch_with_correct(&[1.0, 1.0], &[0, 1], 2);
        assert_eq!(cross_entropy(&one_hot).unwrap().value, 0.0);
        let uniform = BatchPosteriors::from_rows(&[vec![0.25; 4], vec![0.25; 4]], vec![1, 3]).unwrap();
        assert!((cross_entropy(&uniform).unwrap().value - 4f64.ln()).abs() < 1e-15);
        let b = batch_with_correct(&[0.5, 0.25], &[0, 1], 2);
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((cross_entropy(&b).unwrap().value - expect).abs() < 1e-15);
        assert!((expect - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_zero_posterior() {
        let b = BatchPosteriors::from_rows(&[vec![0.0, 1.0]], vec![0]).unwrap();
        assert!(matches!(cross_entropy(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn batch_validation() {
        assert!(BatchPosteriors::from_rows(&[vec![0.5, 0.6]], vec![0]).is_err());
        assert!(BatchPosteriors::from_rows(&[vec![0.5, 0.5]], vec![2]).is_err());
    }

    #[test]
    fn decomposition_hand_values() {
        // class 0: {0.5}; class 1: {0.25, 0.25}
        let b = batch_with_correct(&[0.5, 0.25, 0.25], &[0, 1, 1], 2);
        let terms = class_decomposed_ce(&b).unwrap();
        assert!((terms[0].term - 2f64.ln() / 3.0).abs() < 1e-15);
        assert!((terms[1].term - 2.0 * 4f64.ln() / 3.0).abs() < 1e-15);
        assert!((terms[1].geometric_mean - 0.25).abs() < 1e-15);
        let single = batch_with_correct(&[0.3, 0.6], &[1, 1], 3);
        let t = class_decomposed_ce(&single).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t[0].term - cross_entropy(&single).unwrap().value).abs() < 1e-15);
    }

    #[test]
    fn ifw_values() {
        let w = ifw_weights(100, &[50, 50]);
        assert_eq!(w.weights, vec![Some(2.0), Some(2.0)]);
        let w = ifw_weights(100, &[90, 10, 0]);
        assert!((w.get(0).unwrap() - 10.0 / 9.0).abs() < 1e-15);
        assert_eq!(w.get(1), Some(10.0));
        assert_eq!(w.get(2), None);
    }

    #[test]
    fn ifw_equalises_class_contributions() {
        // with w_c = N / N_c every class enters with coefficient w_c N_c / N = 1
        let b = batch_with_correct(&[0.5, 0.2, 0.4, 0.9], &[0, 0, 0, 1], 2);
        let w = ifw_weights(4, &[3, 1]);
        let loss = ifw_ce(&b, &w).unwrap().value;
        let terms = class_decomposed_ce(&b).unwrap();
        for t in &terms {
            assert!((w.get(t.class).unwrap() * t.count as f64 / 4.0 - 1.0).abs() < 1e-15);
        }
        let per_class: f64 = terms.iter().map(|t| -t.geometric_mean.ln()).sum();
        assert!((loss - per_class).abs() < 1e-12);
    }

    #[test]
    fn recall_weight_values() {
        let w = recall_weights(100, &[10], &[0.0], RECALL_EPS).unwrap();
        assert_eq!(w.get(0), Some(10.0001));
        let w = recall_weights(100, &[10], &[1.0], RECALL_EPS).unwrap();
        assert_eq!(w.get(0), Some(1e-4));
        let w = recall_weights(90, &[30], &[0.5], RECALL_EPS).unwrap();
        assert!((w.get(0).unwrap() - 1.5001).abs() < 1e-12);
        assert!(recall_weights(90, &[30], &[1.5], RECALL_EPS).is_err());
    }

    #[test]
    fn multitask_hand_values() {
        let b = batch_with_correct(&[0.5, 0.25], &[0, 1], 2);
        let w = ClassWeights {
            weights: vec![Some(3.0), Some(1.0)],
            ..ClassWeights::uniform(2)
        };
        let loss = multitask_recall_ce(&b, &w).unwrap().value;
        let expect = (3.0 * 2f64.ln() + 4f64.ln()) / 4.0;
        assert!((loss - expect).abs() < 1e-15);
        assert!((expect - 0.866434).abs() < 1e-6);
        let single = batch_with_correct(&[0.3], &[1], 2);
        let l = multitask_recall_ce(&single, &w).unwrap().value;
        assert!((l + 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn missing_weight_is_an_error() {
        let b = batch_with_correct(&[0.5], &[1], 2);
        let w = ifw_weights(10, &[10, 0]);
        assert!(multitask_recall_ce(&b, &w).is_err());
    }

    #[test]
    fn total_loss_is_mean() {
        assert_eq!(multitask_total_loss(&[1.7]).unwrap(), 1.7);
        assert_eq!(multitask_total_loss(&[1.0, 3.0]).unwrap(), 2.0);
        assert!((multitask_total_loss(&[0.37; 43]).unwrap() - 0.37).abs() < 1e-15);
        assert!(multitask_total_loss(&[]).is_err());
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..17, 1usize..64).prop_flat_map(|(c, n)| {
            (
                prop::collection::vec(prop::collection::vec(0.01f64..1.0, c), n),
                prop::collection::vec(0..c, n),
            )
                .prop_map(|(rows, labels)| {
                    let rows = rows
                        .into_iter()
                        .map(|r| {
                            let s: f64 = r.iter().sum();
                            r.into_iter().map(|v| v / s).collect()
                        })
                        .collect();
                    (rows, labels)
                })
        })
    }

    proptest! {
        #[test]
        fn decomposition_sums_to_ce((rows, labels) in arb_batch()) {
            let b = BatchPosteriors::from_rows(&rows, labels).unwrap();
            let sum: f64 = class_decomposed_ce(&b).unwrap().iter().map(|t| t.term).sum();
            prop_assert!((sum - cross_entropy(&b).unwrap().value).abs() < 1e-9);
        }

        #[test]
        fn weighted_mean_bounds_and_scale_invariance(
            (rows, labels) in arb_batch(),
            raw in prop::collection::vec(0.01f64..50.0, 16),
            k in 0.01f64..100.0,
        ) {
            let b = BatchPosteriors::from_rows(&rows, labels).unwrap();
            let c = b.num_classes();
            let w = ClassWeights {
                weights: raw[..c].iter().map(|&v| Some(v)).collect(),
                ..ClassWeights::uniform(c)
            };
            let terms = b.example_terms().unwrap();
            let lo = terms.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = multitask_recall_ce(&b, &w).unwrap();
            prop_assert!(l.value >= lo - 1e-12 && l.value <= hi + 1e-12);
            let ls = multitask_recall_ce(&b, &w.scaled(k)).unwrap();
            prop_assert!((l.value - ls.value).abs() < 1e-12);
            for (g, gs) in l.grad.data().iter().zip(ls.grad.data()) {
                prop_assert!((g - gs).abs() <= 1e-12 * g.abs().max(1.0));
            }
            let uniform = multitask_recall_ce(&b, &ClassWeights::uniform(c)).unwrap();
            prop_assert!((uniform.value - cross_entropy(&b).unwrap().value).abs() < 1e-12);
        }

        #[test]
        fn recall_weights_decrease_with_recall(
            total in 1usize..10_000, frac in 0.001f64..1.0, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0,
        ) {
            prop_assume!((r1 - r2).abs() > 1e-9);
            let nc = ((total as f64 * frac).ceil() as usize).clamp(1, total);
            let w1 = recall_weights(total, &[nc], &[r1], RECALL_EPS).unwrap().get(0).unwrap();
            let w2 = recall_weights(total, &[nc], &[r2], RECALL_EPS).unwrap().get(0).unwrap();
            prop_assert_eq!(r1 < r2, w1 > w2);
        }
    }
}
