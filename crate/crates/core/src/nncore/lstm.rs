use rand::Rng;

use super::linear::{affine, axpy, dot};
use super::{sigmoid, Array, Module, Parameter};
use crate::{Error, Result};

/// Standard LSTM cell. Gate rows are laid out as `[input, forget, candidate,
/// output]`, each `hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: Parameter,
    pub w_hh: Parameter,
    pub bias: Parameter,
}

/// Everything the backward pass of one step needs.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCell {
    /// Weights uniform in `±1/sqrt(hidden)`, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w_ih = draw(4 * hidden * input);
        let w_hh = draw(4 * hidden * hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        Self::from_parts(
            name,
            Array::from_vec(&[4 * hidden, input], w_ih).unwrap(),
            Array::from_vec(&[4 * hidden, hidden], w_hh).unwrap(),
            Array::vector(bias),
        )
    }

    pub fn from_parts(name: &str, w_ih: Array, w_hh: Array, bias: Array) -> Self {
        let four_h = w_hh.shape()[0];
        assert_eq!(four_h % 4, 0);
        assert_eq!(w_hh.shape()[1] * 4, four_h);
        assert_eq!(w_ih.shape()[0], four_h);
        assert_eq!(bias.len(), four_h);
        Self {
            w_ih: Parameter::new(format!("{name}.w_ih"), w_ih),
            w_hh: Parameter::new(format!("{name}.w_hh"), w_hh),
            bias: Parameter::new(format!("{name}.bias"), bias),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.value.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.value.shape()[1]
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmCache {
        let hd = self.hidden();
        assert_eq!(x.len(), self.input(), "lstm input length");
        assert_eq!(h_prev.len(), hd);
        assert_eq!(c_prev.len(), hd);
        let mut gates = vec![0.0; 4 * hd];
        affine(self.w_ih.value.data(), self.bias.value.data(), x, &mut gates);
        let w_hh = self.w_hh.value.data();
        for (r, g) in gates.iter_mut().enumerate() {
            *g += dot(&w_hh[r * hd..(r + 1) * hd], h_prev);
        }
        for k in 0..hd {
            gates[k] = sigmoid(gates[k]);
            gates[hd + k] = sigmoid(gates[hd + k]);
            gates[2 * hd + k] = gates[2 * hd + k].tanh();
            gates[3 * hd + k] = sigmoid(gates[3 * hd + k]);
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            c[k] = gates[hd + k] * c_prev[k] + gates[k] * gates[2 * hd + k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[3 * hd + k] * tanh_c[k];
        }
        LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Backward through one step given `dL/dh` and `dL/dc` flowing into this
    /// step's outputs. Accumulates parameter gradients and returns
    /// `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &mut self,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let g = &cache.gates;
        let mut da = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, cand, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let d_i = dct * cand;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev[k];
            dc_prev[k] = dct * f;
            da[k] = d_i * i * (1.0 - i);
            da[hd + k] = d_f * f * (1.0 - f);
            da[2 * hd + k] = d_g * (1.0 - cand * cand);
            da[3 * hd + k] = d_o * o * (1.0 - o);
        }
        let d_in = self.input();
        let mut dx = vec![0.0; d_in];
        let mut dh_prev = vec![0.0; hd];
        let w_ih = self.w_ih.value.data();
        let w_hh = self.w_hh.value.data();
        let gw_ih = self.w_ih.grad.data_mut();
        let gw_hh = self.w_hh.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        for (r, &d) in da.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            axpy(d, &cache.x, &mut gw_ih[r * d_in..(r + 1) * d_in]);
            axpy(d, &cache.h_prev, &mut gw_hh[r * hd..(r + 1) * hd]);
            axpy(d, &w_ih[r * d_in..(r + 1) * d_in], &mut dx);
            axpy(d, &w_hh[r * hd..(r + 1) * hd], &mut dh_prev);
        }
        (dx, dh_prev, dc_prev)
    }
}

impl Module for LstmCell {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

/// One LSTM step on arrays: returns `(h, c)`.
pub fn lstm_step(x: &Array, h_prev: &Array, c_prev: &Array, cell: &LstmCell) -> Result<(Array, Array)> {
    let hd = cell.hidden();
    if x.len() != cell.input() || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::ShapeMismatch(format!(
            "lstm step expects x[{}], h[{hd}], c[{hd}], got x[{}], h[{}], c[{}]",
            cell.input(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let out = cell.step(x.data(), h_prev.data(), c_prev.data());
    Ok((Array::vector(out.h), Array::vector(out.c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> LstmCell {
        LstmCell::from_parts(
            "z",
            Array::zeros(&[4 * hidden, input]),
            Array::zeros(&[4 * hidden, hidden]),
            Array::zeros(&[4 * hidden]),
        )
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let cell = zero_cell(3, 2);
        let out = cell.step(&[1.0, -2.0, 0.5], &[0.3, 0.4], &[0.0, 0.0]);
        assert_eq!(out.h, vec![0.0, 0.0]);
        assert_eq!(out.c, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut cell = zero_cell(2, 3);
        cell.bias.value.data_mut()[3..6].iter_mut().for_each(|b| *b = 50.0);
        let c_prev = [0.7, -1.3, 2.0];
        let out = cell.step(&[0.5, 0.5], &[0.1, 0.2, 0.3], &c_prev);
        // sigmoid(50) = 1 - 2e-22, candidate tanh(0) = 0
        for (c, p) in out.c.iter().zip(c_prev) {
            assert!((c - p).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new("l", 5, 4, &mut rng);
        let b = cell.bias.value.data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
        let bound = 0.5;
        assert!(cell.w_ih.value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn array_entry_point_checks_shapes() {
        let cell = zero_cell(3, 2);
        let bad = lstm_step(
            &Array::zeros(&[2]),
            &Array::zeros(&[2]),
            &Array::zeros(&[2]),
            &cell,
        );
        assert!(bad.is_err());
    }
}
