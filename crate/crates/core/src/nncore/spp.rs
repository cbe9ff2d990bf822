use super::Array;
use crate::{Error, Result};

/// Pyramid levels used by the local recognition model.
pub const DEFAULT_SPP_GRIDS: [usize; 4] = [6, 3, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cell {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

/// Precomputed cell partition for spatial pyramid average pooling over an
/// `H x W` grid. Level `g` splits rows at `round(i * H / g)` and columns at
/// `round(j * W / g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SppPlan {
    height: usize,
    width: usize,
    levels: Vec<usize>,
    cells: Vec<Cell>,
}

fn boundary(i: usize, extent: usize, g: usize) -> usize {
    ((i * extent) as f64 / g as f64).round() as usize
}

impl SppPlan {
    pub fn new(height: usize, width: usize, levels: &[usize]) -> Result<Self> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "pyramid levels must be positive, got {levels:?}"
            )));
        }
        let finest = *levels.iter().max().unwrap();
        if height < finest || width < finest {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} is smaller than the finest pyramid level {finest}"
            )));
        }
        let mut cells = Vec::new();
        for &g in levels {
            for i in 0..g {
                for j in 0..g {
                    cells.push(Cell {
                        r0: boundary(i, height, g),
                        r1: boundary(i + 1, height, g),
                        c0: boundary(j, width, g),
                        c1: boundary(j + 1, width, g),
                    });
                }
            }
        }
        Ok(Self {
            height,
            width,
            levels: levels.to_vec(),
            cells,
        })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn output_len(&self, channels: usize) -> usize {
        self.cells.len() * channels
    }

    /// Pools a row-major `[H, W, C]` grid into `[cells * C]`, cell-major with
    /// channels innermost.
    pub fn pool(&self, grid: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(grid.len(), self.height * self.width * channels);
        let mut out = vec![0.0; self.output_len(channels)];
        for (k, cell) in self.cells.iter().enumerate() {
            let acc = &mut out[k * channels..(k + 1) * channels];
            for r in cell.r0..cell.r1 {
                for c in cell.c0..cell.c1 {
                    let base = (r * self.width + c) * channels;
                    for (a, v) in acc.iter_mut().zip(&grid[base..base + channels]) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / ((cell.r1 - cell.r0) * (cell.c1 - cell.c0)) as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        out
    }

    /// Adds the gradient w.r.t. the grid into `grad_grid`.
    pub fn backward_into(&self, grad_out: &[f64], channels: usize, grad_grid: &mut [f64]) {
        assert_eq!(grad_out.len(), self.output_len(channels));
        assert_eq!(grad_grid.len(), self.height * self.width * channels);
        for (k, cell) in self.cells.iter().enumerate() {
            let g = &grad_out[k * channels..(k + 1) * channels];
            let inv = 1.0 / ((cell.r1 - cell.r0) * (cell.c1 - cell.c0)) as f64;
            for r in cell.r0..cell.r1 {
                for c in cell.c0..cell.c1 {
                    let base = (r * self.width + c) * channels;
                    for (d, v) in grad_grid[base..base + channels].iter_mut().zip(g) {
                        *d += v * inv;
                    }
                }
            }
        }
    }
}

fn grid_dims(grid: &Array) -> Result<(usize, usize, usize)> {
    match grid.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::ShapeMismatch(format!(
            "feature grid must be [H, W, C], got {other:?}"
        ))),
    }
}

/// Spatial pyramid average pooling of an `[H, W, C]` grid.
pub fn spp_pool(grid: &Array, levels: &[usize]) -> Result<Array> {
    let (h, w, c) = grid_dims(grid)?;
    let plan = SppPlan::new(h, w, levels)?;
    Ok(Array::vector(plan.pool(grid.data(), c)))
}

/// Gradient of [`spp_pool`] w.r.t. the grid.
pub fn spp_pool_backward(grid_shape: &[usize], levels: &[usize], grad_out: &Array) -> Result<Array> {
    let grid = Array::zeros(grid_shape);
    let (h, w, c) = grid_dims(&grid)?;
    let plan = SppPlan::new(h, w, levels)?;
    if grad_out.len() != plan.output_len(c) {
        return Err(Error::ShapeMismatch(format!(
            "spp gradient has {} values, expected {}",
            grad_out.len(),
            plan.output_len(c)
        )));
    }
    let mut grad = grid;
    plan.backward_into(grad_out.data(), c, grad.data_mut());
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pyramid_output_is_fifty_cells_per_channel() {
        for c in [1, 3, 8] {
            let grid = Array::zeros(&[6, 6, c]);
            assert_eq!(spp_pool(&grid, &DEFAULT_SPP_GRIDS).unwrap().len(), 50 * c);
        }
        let grid = Array::zeros(&[9, 13, 2]);
        assert_eq!(spp_pool(&grid, &DEFAULT_SPP_GRIDS).unwrap().len(), 100);
    }

    #[test]
    fn constant_grid_pools_to_constant() {
        let mut grid = Array::zeros(&[7, 11, 3]);
        grid.fill(-2.5);
        let out = spp_pool(&grid, &DEFAULT_SPP_GRIDS).unwrap();
        assert!(out.data().iter().all(|&v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_global_average() {
        // two channels, channel 1 is channel 0 negated
        let vals = vec![1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0];
        let grid = Array::from_vec(&[2, 2, 2], vals).unwrap();
        let out = spp_pool(&grid, &[1]).unwrap();
        assert_eq!(out.data(), &[2.5, -2.5]);
    }

    #[test]
    fn grid_smaller_than_finest_level_is_rejected() {
        let grid = Array::zeros(&[5, 8, 1]);
        assert!(matches!(
            spp_pool(&grid, &DEFAULT_SPP_GRIDS),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_spreads_inverse_cell_size() {
        let levels = [2];
        let grad_out = Array::vector(vec![1.0; 4]);
        let g = spp_pool_backward(&[5, 4, 1], &levels, &grad_out).unwrap();
        // rows split at round(2.5) = 3: top cells have 3x2 members, bottom 2x2
        for r in 0..5 {
            for c in 0..4 {
                let expect = if r < 3 { 1.0 / 6.0 } else { 1.0 / 4.0 };
                assert!((g.data()[r * 4 + c] - expect).abs() < 1e-15);
            }
        }
    }
}
