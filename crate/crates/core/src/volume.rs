//! Dense 3D scalar grids and binary masks.
//!
//! Voxel `(x, y, z)` lives at flat index `(x * dims[1] + y) * dims[2] + z`.

use crate::error::{Error, Result};

pub type Coord = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume holds non-finite values".into()));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: Coord) -> f32 {
        self.data[flat_index(self.dims, c)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Binary mask; every stored byte is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_len(dims, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(Coord) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(u8::from(f([x, y, z])));
                }
            }
        }
        Mask { dims, data }
    }

    /// Thresholds probabilities at `threshold` (strictly greater is foreground).
    pub fn from_probs(dims: [usize; 3], probs: &[f64], threshold: f64) -> Result<Self> {
        check_len(dims, probs.len())?;
        Ok(Mask {
            dims,
            data: probs.iter().map(|&p| u8::from(p > threshold)).collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: Coord) -> bool {
        self.data[flat_index(self.dims, c)] != 0
    }

    pub fn set(&mut self, c: Coord, on: bool) {
        let i = flat_index(self.dims, c);
        self.data[i] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground(&self) -> Vec<Coord> {
        (0..self.data.len())
            .filter(|&i| self.data[i] != 0)
            .map(|i| unflatten(self.dims, i))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Inclusive `(min, max)` corners of the foreground, `None` when empty.
    pub fn bounding_box(&self) -> Option<(Coord, Coord)> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for c in self.foreground() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        any.then_some((lo, hi))
    }
}

pub fn flat_index(dims: [usize; 3], c: Coord) -> usize {
    (c[0] * dims[1] + c[1]) * dims[2] + c[2]
}

pub fn unflatten(dims: [usize; 3], i: usize) -> Coord {
    let z = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let x = i / (dims[1] * dims[2]);
    [x, y, z]
}

fn check_len(dims: [usize; 3], len: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != len || n == 0 {
        return Err(Error::Dimension(format!(
            "grid {dims:?} needs {n} values, got {len}"
        )));
    }
    Ok(())
}
