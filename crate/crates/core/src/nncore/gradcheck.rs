//! Central finite differences for verifying backward passes.
//!
//! These helpers only ever call forward evaluations, so they stay independent
//! of the hand-written backward code they check.

use super::Module;

/// Relative tolerance and absolute floor used throughout the crate's
/// gradient tests.
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Finite-difference gradient of `loss` w.r.t. every parameter of `model`,
/// in `parameters()` order.
pub fn parameter_gradients<M, F>(model: &mut M, step: f64, mut loss: F) -> Vec<Vec<f64>>
where
    M: Module,
    F: FnMut(&M) -> f64,
{
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (pi, &n) in sizes.iter().enumerate() {
        let mut grads = Vec::with_capacity(n);
        for j in 0..n {
            let orig = model.parameters()[pi].value.data()[j];
            model.parameters_mut()[pi].value.data_mut()[j] = orig + step;
            let plus = loss(model);
            model.parameters_mut()[pi].value.data_mut()[j] = orig - step;
            let minus = loss(model);
            model.parameters_mut()[pi].value.data_mut()[j] = orig;
            grads.push((plus - minus) / (2.0 * step));
        }
        out.push(grads);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        let offset = self.checked;
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.mismatches
            .extend(other.mismatches.into_iter().map(|mut m| {
                m.index += offset;
                m
            }));
    }
}

/// Elementwise comparison: an entry passes when `|a - n| <= abs_floor` or
/// `|a - n| / max(|a|, |n|) < rel_tol`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        checked: analytic.len(),
        ..Default::default()
    };
    for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel < rel_tol) {
            report.mismatches.push(Mismatch {
                index,
                analytic: a,
                numeric: n,
            });
        }
    }
    report
}
