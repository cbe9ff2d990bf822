use rand::seq::SliceRandom;

use super::{Split, Splits};
use crate::{seeded_rng, Error, Result};

/// Random section-level partition into train / val / test.
///
/// Sections are shuffled with `seed`, then each is assigned to the split with
/// the largest remaining quota `fraction * n - assigned` (ties go to train,
/// then val, then test).
pub fn split_by_section(sections: &[String], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::config(
            "split_fractions",
            format!("fractions must be nonnegative, got {fractions:?}"),
        ));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split_fractions",
            format!("fractions must sum to 1, got {sum} from {fractions:?}"),
        ));
    }
    if sections.len() < 3 {
        return Err(Error::config(
            "sections",
            format!("need at least 3 sections to split, got {}", sections.len()),
        ));
    }
    let mut order = sections.to_vec();
    order.shuffle(&mut seeded_rng(seed, 0));

    let n = sections.len() as f64;
    let mut quota = fractions.map(|f| f * n);
    let mut splits = Splits::default();
    for id in order {
        let mut best = 0;
        for k in 1..3 {
            if quota[k] > quota[best] {
                best = k;
            }
        }
        quota[best] -= 1.0;
        splits.get_mut(Split::ALL[best]).push(id);
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn deterministic_for_seed() {
        let a = split_by_section(&ids(10), [0.8, 0.1, 0.1], 7).unwrap();
        let b = split_by_section(&ids(10), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        a.validate_disjoint().unwrap();
    }

    #[test]
    fn all_train() {
        let s = split_by_section(&ids(5), [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train.len(), 5);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn bad_fractions() {
        let err = split_by_section(&ids(5), [0.5, 0.2, 0.2], 1).unwrap_err();
        assert!(err.to_string().contains("split_fractions"));
        assert!(split_by_section(&ids(5), [1.2, -0.2, 0.0], 1).is_err());
        assert!(split_by_section(&ids(2), [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn sizes_close_to_exact_quota() {
        // exact: 174.6 / 9.7 / 9.7
        for seed in 0..5 {
            let s = split_by_section(&ids(194), [0.9, 0.05, 0.05], seed).unwrap();
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), 194);
            assert!((s.train.len() as i64 - 175).abs() <= 1);
            assert!((s.val.len() as i64 - 10).abs() <= 1);
            assert!((s.test.len() as i64 - 9).abs() <= 1);
            s.validate_disjoint().unwrap();
        }
    }
}
