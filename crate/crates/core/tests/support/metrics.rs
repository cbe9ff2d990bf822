//! Definitional oracles for the metrics and random small instances to
//! compare them on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use roadattr_core::eval::{accuracy, average_precision, cooccurrence, macro_f1, ConfusionMatrix};
use roadattr_core::seeded_rng;

pub fn oracle_macro_f1(classes: usize, truth: &[usize], pred: &[usize]) -> f64 {
    let mut f1s = Vec::new();
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        f1s.push(100.0 * 2.0 * tp / (2.0 * tp + fp + fneg));
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

pub fn oracle_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

/// Rank of each item is one plus the number of items ordered before it
/// (higher score, or equal score and lower index).
pub fn oracle_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut precisions = Vec::new();
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        let rank = 1 + (0..scores.len()).filter(|&j| before(j, i)).count();
        let hits = 1 + (0..scores.len()).filter(|&j| labels[j] && before(j, i)).count();
        precisions.push(hits as f64 / rank as f64);
    }
    (!precisions.is_empty()).then(|| precisions.iter().sum::<f64>() / precisions.len() as f64)
}

pub fn oracle_cooc(classes: usize, sections: &[Vec<usize>]) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for s in sections {
                for t in 1..s.len() {
                    if s[t - 1] == i && s[t] == j {
                        *cell += 1;
                    }
                }
            }
        }
    }
    m
}

fn skewed_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.5 {
                0
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect()
}

/// One random instance compared against every oracle; `Err` describes the
/// first disagreement.
pub fn metric_trial(seed: u64) -> Result<(), String> {
    let mut rng = seeded_rng(seed, 0xE7A1);
    let classes = rng.random_range(2..6);
    let n = rng.random_range(1..60);
    let truth = skewed_labels(&mut rng, n, classes);
    let pred: Vec<usize> = truth
        .iter()
        .map(|&t| if rng.random::<f64>() < 0.6 { t } else { rng.random_range(0..classes) })
        .collect();

    let cm = ConfusionMatrix::from_pairs(classes, &truth, &pred).map_err(|e| e.to_string())?;
    if cm.total() != n as u64 {
        return Err(format!("confusion total {} != {n}", cm.total()));
    }
    let f1 = macro_f1(&cm).map_err(|e| e.to_string())?.macro_f1;
    let want = oracle_macro_f1(classes, &truth, &pred);
    if (f1 - want).abs() > 1e-9 {
        return Err(format!("macro-F1 {f1} vs oracle {want}"));
    }
    let acc = accuracy(&cm).map_err(|e| e.to_string())?;
    if (acc - oracle_accuracy(&truth, &pred)).abs() > 1e-9 {
        return Err(format!("accuracy {acc} vs oracle {}", oracle_accuracy(&truth, &pred)));
    }

    // coarse scores so ties occur
    let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
    let ap = average_precision(&scores, &labels);
    let want = oracle_ap(&scores, &labels);
    match (ap, want) {
        (None, None) => {}
        (Some(a), Some(w)) if (a - w).abs() <= 1e-9 => {}
        _ => return Err(format!("AP {ap:?} vs oracle {want:?}")),
    }
    let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
    if average_precision(&squashed, &labels) != ap {
        return Err("AP changed under a strictly increasing transform".into());
    }

    let sections: Vec<Vec<usize>> = (0..rng.random_range(1..5))
        .map(|_| {
            let len = rng.random_range(0..15);
            skewed_labels(&mut rng, len, classes)
        })
        .collect();
    let m = cooccurrence(classes, sections.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
    let want = oracle_cooc(classes, &sections);
    for (i, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if m.get(i, j) != v {
                return Err(format!("co-occurrence ({i},{j}) {} vs oracle {v}", m.get(i, j)));
            }
        }
    }
    let expected_total: usize = sections.iter().map(|s| s.len().saturating_sub(1)).sum();
    if m.total() != expected_total as u64 {
        return Err(format!("co-occurrence total {} vs {expected_total}", m.total()));
    }
    Ok(())
}

/// The hand-worked values: macro-F1 on the 3-class confusion and AP on the
/// 3-item ranking.
pub fn worked_values() -> Result<(f64, f64), String> {
    let cm = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 2], vec![1, 0, 4]]).map_err(|e| e.to_string())?;
    let f1 = macro_f1(&cm).map_err(|e| e.to_string())?.macro_f1;
    let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).ok_or("no positives")?;
    if (f1 - 79.55).abs() > 0.005 || (ap - 0.8333).abs() > 0.00005 {
        return Err(format!("worked values off: macro-F1 {f1}, AP {ap}"));
    }
    Ok((f1, ap))
}
