mod support;

use roadattr_core::eval::{macro_f1, ConfusionMatrix};
use support::metrics::{metric_trial, worked_values};

#[test]
fn metrics_match_definitional_oracles() {
    for seed in 0..200 {
        if let Err(e) = metric_trial(seed) {
            panic!("seed {seed}: {e}");
        }
    }
}

#[test]
fn worked_examples() {
    let (f1, ap) = worked_values().unwrap();
    assert!((f1 - 79.55).abs() < 0.005);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn absent_classes_are_excluded_from_the_average() {
    // class 2 never occurs in truth but is predicted once
    let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 1], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
    let r = macro_f1(&cm).unwrap();
    assert_eq!(r.per_class[2], None);
    let f0 = 100.0 * 6.0 / 7.0;
    assert!((r.macro_f1 - (f0 + 100.0) / 2.0).abs() < 1e-9);
}
