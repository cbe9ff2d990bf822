use rand::Rng;

use super::{Array, Module, Parameter};
use crate::{Error, Result};

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x + b` with `W` stored row-major as `[d_out, d_in]`.
#[inline]
pub(crate) fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let d_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = bias[i] + dot(&weight[i * d_in..(i + 1) * d_in], x);
    }
}

/// Accumulates the parameter gradients of `W x + b` and, if requested, adds
/// `W^T dy` into `grad_x`.
#[inline]
pub(crate) fn affine_backward(
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_x: Option<&mut [f64]>,
) {
    let d_in = x.len();
    for (i, &g) in dy.iter().enumerate() {
        grad_bias[i] += g;
        if g != 0.0 {
            axpy(g, x, &mut grad_weight[i * d_in..(i + 1) * d_in]);
        }
    }
    if let Some(gx) = grad_x {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &weight[i * d_in..(i + 1) * d_in], gx);
            }
        }
    }
}

fn check_linear_shapes(input: &Array, weight: &Array, bias: &Array) -> Result<(usize, usize)> {
    if weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "linear expects weight [d_out, d_in] and bias [d_out], got {:?} and {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if input.last_dim() != d_in {
        return Err(Error::ShapeMismatch(format!(
            "linear input trailing dim {} does not match d_in {d_in}",
            input.last_dim()
        )));
    }
    if bias.len() != d_out {
        return Err(Error::ShapeMismatch(format!(
            "linear bias length {} does not match d_out {d_out}",
            bias.len()
        )));
    }
    Ok((d_in, d_out))
}

/// Affine map over the trailing dimension: `[*, d_in] -> [*, d_out]`.
pub fn linear(input: &Array, weight: &Array, bias: &Array) -> Result<Array> {
    let (_, d_out) = check_linear_shapes(input, weight, bias)?;
    let rows = input.rows();
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        affine(
            weight.data(),
            bias.data(),
            input.row(r),
            &mut out[r * d_out..(r + 1) * d_out],
        );
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Array::from_vec(&shape, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub input: Array,
    pub weight: Array,
    pub bias: Array,
}

pub fn linear_backward(
    input: &Array,
    weight: &Array,
    grad_output: &Array,
) -> Result<LinearGrads> {
    let d_out = weight.shape().first().copied().unwrap_or(0);
    let bias = Array::zeros(&[d_out.max(1)]);
    check_linear_shapes(input, weight, &bias)?;
    if grad_output.rows() != input.rows() || grad_output.last_dim() != d_out {
        return Err(Error::ShapeMismatch(format!(
            "linear grad_output {:?} does not match input {:?}",
            grad_output.shape(),
            input.shape()
        )));
    }
    let mut grad_input = Array::zeros(input.shape());
    let mut grad_weight = Array::zeros(weight.shape());
    let mut grad_bias = Array::zeros(&[d_out]);
    for r in 0..input.rows() {
        affine_backward(
            weight.data(),
            input.row(r),
            grad_output.row(r),
            grad_weight.data_mut(),
            grad_bias.data_mut(),
            Some(grad_input.row_mut(r)),
        );
    }
    Ok(LinearGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Fully connected layer holding its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_parts(
            name,
            Array::from_vec(&[d_out, d_in], w).unwrap(),
            Array::zeros(&[d_out]),
        )
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self::from_parts(name, Array::zeros(&[d_out, d_in]), Array::zeros(&[d_out]))
    }

    pub fn from_parts(name: &str, weight: Array, bias: Array) -> Self {
        assert_eq!(weight.rank(), 2);
        assert_eq!(bias.len(), weight.shape()[0]);
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d_in(), "linear input length");
        let mut out = vec![0.0; self.d_out()];
        affine(self.weight.value.data(), self.bias.value.data(), x, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        self.backward_into(x, dy, Some(&mut dx));
        dx
    }

    pub fn backward_into(&mut self, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        affine_backward(
            self.weight.value.data(),
            x,
            dy,
            self.weight.grad.data_mut(),
            self.bias.grad.data_mut(),
            dx,
        );
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}
