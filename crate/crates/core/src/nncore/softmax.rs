/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Vector-Jacobian product of softmax: given `p = softmax(s)` and `dL/dp`,
/// returns `dL/ds`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let p = softmax(&[0.7; 5]);
        for v in p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_pair() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn normalised_and_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12)
        ) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|s| s + 1000.0).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
