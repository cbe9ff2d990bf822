use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SQAF";

/// `H x W x C` grid of `f32` features, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch("feature grid dims must be positive".into()));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "feature grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// All grids of a feature file; grids are addressed by offset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: Vec::new(),
        }
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.grid_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, grid: &FeatureGrid) -> Result<usize> {
        if (grid.height, grid.width, grid.channels) != (self.height, self.width, self.channels) {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{}x{} does not match store {}x{}x{}",
                grid.height, grid.width, grid.channels, self.height, self.width, self.channels
            )));
        }
        self.data.extend_from_slice(&grid.values);
        Ok(self.len() - 1)
    }

    pub fn values(&self, offset: usize) -> &[f32] {
        let n = self.grid_len();
        &self.data[offset * n..(offset + 1) * n]
    }

    pub fn grid(&self, offset: usize) -> FeatureGrid {
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values(offset).to_vec(),
        }
    }

    pub fn grid_f64(&self, offset: usize) -> Vec<f64> {
        self.values(offset).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Header: magic `SQAF`, then `H`, `W`, `C` as `u32` LE; payload: grids of
/// `f32` LE values.
pub fn write_features(path: &Path, store: &FeatureStore) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    for d in [store.height, store.width, store.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &store.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing SQAF header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(bad(format!("invalid grid dims {h}x{w}x{c}")));
    }
    let payload = &bytes[16..];
    let grid_bytes = h * w * c * 4;
    if payload.len() % grid_bytes != 0 {
        return Err(bad(format!(
            "payload of {} bytes is not a whole number of {grid_bytes}-byte grids",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!(
            "non-finite value in grid {} (element {})",
            i / (h * w * c),
            i % (h * w * c)
        )));
    }
    Ok(FeatureStore {
        height: h,
        width: w,
        channels: c,
        data,
    })
}
