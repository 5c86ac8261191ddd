//! Scalar volumes and the preprocessing applied before registration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;

/// Voxel counts along (z, y, x). Storage is z-major: `index = (z·H + y)·W + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Dims([d, h, w])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.0[2];
        let rest = index / self.0[2];
        [rest / self.0[1], rest % self.0[1], x]
    }

    /// Stride in the flat buffer for a unit step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.0[1] * self.0[2],
            1 => self.0[2],
            _ => 1,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.0[a] - 1) as f64)
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.0[0] as f64 - 1.0) / 2.0,
            (self.0[1] as f64 - 1.0) / 2.0,
            (self.0[2] as f64 - 1.0) / 2.0,
        ]
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Dims(d)
    }
}

/// A scalar 3D image with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    /// mm per voxel along (z, y, x).
    spacing: [f32; 3],
    /// mm, position of voxel (0, 0, 0).
    origin: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], origin: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "volume data has {} values, dims {:?} require {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        if dims.is_empty() {
            return Err(Error::InvalidParameter(
                "volume has a zero-length axis".into(),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Volume filled with `value`, unit spacing and zero origin.
    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> f32 + Sync) -> Self {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                f(z, y, x)
            })
            .collect();
        Volume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        }
    }

    pub fn with_geometry(mut self, spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        self.origin = origin;
        Ok(self)
    }

    /// Same geometry, new data.
    pub(crate) fn like(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Trilinear sample at a continuous voxel position, border-clamped.
    pub fn sample(&self, pos: [f64; 3]) -> f64 {
        interp::sample(&self.data, self.dims, pos)
    }

    /// Sub-volume `[lo, hi)` per axis; origin shifts with the crop.
    pub fn crop(&self, bounds: [[usize; 2]; 3]) -> Result<Volume> {
        for (a, [lo, hi]) in bounds.iter().enumerate() {
            if lo >= hi || *hi > self.dims.0[a] {
                return Err(Error::InvalidParameter(format!(
                    "crop bounds {:?} invalid for axis {a} of length {}",
                    [lo, hi],
                    self.dims.0[a]
                )));
            }
        }
        let dims = Dims([
            bounds[0][1] - bounds[0][0],
            bounds[1][1] - bounds[1][0],
            bounds[2][1] - bounds[2][0],
        ]);
        let data = (0..dims.len())
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                self.get(z + bounds[0][0], y + bounds[1][0], x + bounds[2][0])
            })
            .collect();
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += bounds[a][0] as f32 * self.spacing[a];
        }
        Ok(Volume {
            dims,
            spacing: self.spacing,
            origin,
            data,
        })
    }
}

/// Linear intensity window mapped onto [−1, 1] and clamped.
pub fn window_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!(
            "window lower bound {lo} must be below upper bound {hi}"
        )));
    }
    let lo = lo as f64;
    let width = hi as f64 - lo;
    let data = v
        .data
        .par_iter()
        .map(|&x| (2.0 * (x as f64 - lo) / width - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(v.like(data))
}

/// New dims for resampling `dims` at `spacing` onto an isotropic `target_mm` grid.
pub fn isotropic_dims(dims: Dims, spacing: [f32; 3], target_mm: f32) -> Dims {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (dims.0[a] as f64 * spacing[a] as f64 / target_mm as f64).round();
        out[a] = (n as usize).max(1);
    }
    Dims(out)
}

/// Trilinear resampling onto an isotropic grid; the origin is preserved.
pub fn resample_isotropic(v: &Volume, target_mm: f32) -> Result<Volume> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target spacing must be positive, got {target_mm}"
        )));
    }
    let dims = isotropic_dims(v.dims, v.spacing, target_mm);
    let scale: [f64; 3] = std::array::from_fn(|a| target_mm as f64 / v.spacing[a] as f64);
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let c = dims.coords(i);
            let pos = std::array::from_fn(|a| c[a] as f64 * scale[a]);
            v.sample(pos) as f32
        })
        .collect();
    Ok(Volume {
        dims,
        spacing: [target_mm; 3],
        origin: v.origin,
        data,
    })
}
