//! Integer label volumes (organ segmentations).

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Per-voxel labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "label data has {} values, dims {:?} require {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        })
    }

    pub fn with_geometry(mut self, spacing: [f32; 3], origin: [f32; 3]) -> Self {
        self.spacing = spacing;
        self.origin = origin;
        self
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

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Sorted distinct nonzero labels.
    pub fn label_set(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn crop(&self, bounds: [[usize; 2]; 3]) -> Result<LabelVolume> {
        for (a, [lo, hi]) in bounds.iter().enumerate() {
            if lo >= hi || *hi > self.dims.0[a] {
                return Err(Error::InvalidParameter(format!(
                    "crop bounds {:?} invalid for axis {a} of length {}",
                    [lo, hi],
                    self.dims.0[a]
                )));
            }
        }
        let dims = Dims(std::array::from_fn(|a| bounds[a][1] - bounds[a][0]));
        let data = (0..dims.len())
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                self.data[self
                    .dims
                    .index(z + bounds[0][0], y + bounds[1][0], x + bounds[2][0])]
            })
            .collect();
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += bounds[a][0] as f32 * self.spacing[a];
        }
        Ok(LabelVolume {
            dims,
            spacing: self.spacing,
            origin,
            data,
        })
    }

    /// Nearest-neighbour resampling onto the isotropic grid used for images.
    pub fn resample_isotropic(&self, target_mm: f32) -> Result<LabelVolume> {
        if !(target_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "target spacing must be positive, got {target_mm}"
            )));
        }
        let dims = crate::volume::isotropic_dims(self.dims, self.spacing, target_mm);
        let scale: [f64; 3] = std::array::from_fn(|a| target_mm as f64 / self.spacing[a] as f64);
        let data = (0..dims.len())
            .map(|i| {
                let c = dims.coords(i);
                let p = std::array::from_fn(|a| c[a] as f64 * scale[a]);
                self.data[crate::interp::nearest(self.dims, p)]
            })
            .collect();
        Ok(LabelVolume {
            dims,
            spacing: [target_mm; 3],
            origin: self.origin,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_is_sorted_nonzero() {
        let l = LabelVolume::new(Dims::new(1, 1, 6), vec![0, 5, 2, 2, 0, 9]).unwrap();
        assert_eq!(l.label_set(), vec![2, 5, 9]);
        assert_eq!(l.count(2), 2);
    }
}
