use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{linear::axpy, Array, Module, Parameter};
use crate::{Error, Result};

/// Class-embedding width: `max(4, C)`.
pub fn embedding_dim(num_classes: usize) -> usize {
    num_classes.max(4)
}

/// Row of a `[C, d_e]` table.
pub fn embedding_lookup(table: &Parameter, index: usize) -> Result<Array> {
    let rows = table.value.shape()[0];
    if index >= rows {
        return Err(Error::IndexOutOfRange { index, len: rows });
    }
    Ok(Array::vector(table.value.row(index).to_vec()))
}

/// Learned lookup table, `[num_classes, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Parameter,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(name: &str, rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let values = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self::from_array(name, Array::from_vec(&[rows, dim], values).unwrap())
    }

    pub fn from_array(name: &str, table: Array) -> Self {
        assert_eq!(table.rank(), 2);
        Self {
            table: Parameter::new(format!("{name}.table"), table),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn lookup(&self, index: usize) -> Result<&[f64]> {
        if index >= self.rows() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.rows(),
            });
        }
        Ok(self.table.value.row(index))
    }

    /// Accumulates `grad` into row `index` only.
    pub fn backward(&mut self, index: usize, grad: &[f64]) {
        axpy(1.0, grad, self.table.grad.row_mut(index));
    }
}

impl Module for Embedding {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.table]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.table]
    }
}
