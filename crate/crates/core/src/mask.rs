//! Body mask: thresholding, largest 26-connected component, per-slice hole filling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

/// Default body threshold in normalized units (≈ −500 HU under a (−800, 400) window).
pub const DEFAULT_BODY_THRESHOLD: f32 = -0.5;

/// Binary region Ω over which losses and metrics are evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyMask {
    dims: Dims,
    data: Vec<bool>,
    voxel_count: usize,
}

impl BodyMask {
    pub fn from_data(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "mask has {} values, dims {:?} require {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        let voxel_count = data.iter().filter(|&&b| b).count();
        Ok(BodyMask {
            dims,
            data,
            voxel_count,
        })
    }

    /// Mask covering every voxel.
    pub fn full(dims: Dims) -> Self {
        BodyMask {
            dims,
            data: vec![true; dims.len()],
            voxel_count: dims.len(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.data[index]
    }

    /// Flat indices of the voxels inside the mask, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// 2× downsampling: a coarse voxel is inside if any voxel of its block is.
    pub(crate) fn downsample(&self, coarse: Dims) -> BodyMask {
        let mut data = vec![false; coarse.len()];
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                let [z, y, x] = self.dims.coords(i);
                let c = coarse.index(
                    (z / 2).min(coarse.0[0] - 1),
                    (y / 2).min(coarse.0[1] - 1),
                    (x / 2).min(coarse.0[2] - 1),
                );
                data[c] = true;
            }
        }
        let voxel_count = data.iter().filter(|&&b| b).count();
        BodyMask {
            dims: coarse,
            data,
            voxel_count,
        }
    }
}

/// Threshold at `threshold` (strictly greater), keep the largest 26-connected
/// component, then fill holes enclosed within each axial slice.
pub fn compute_body_mask(v: &Volume, threshold: f32) -> Result<BodyMask> {
    let dims = v.dims();
    let candidate: Vec<bool> = v.data().iter().map(|&x| x > threshold).collect();
    if !candidate.iter().any(|&b| b) {
        return Err(Error::NoBodyFound { threshold });
    }
    let mut mask = largest_component(dims, &candidate);
    fill_slice_holes(dims, &mut mask);
    BodyMask::from_data(dims, mask)
}

/// Largest 26-connected component; ties keep the component found first in z-major order.
fn largest_component(dims: Dims, candidate: &[bool]) -> Vec<bool> {
    let [d, h, w] = dims.0;
    let mut label = vec![0u32; dims.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..dims.len() {
        if !candidate[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [z, y, x] = dims.coords(i);
            for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = dims.index(nz, ny, nx);
                        if candidate[j] && label[j] == 0 {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l == best.0).collect()
}

/// 2D flood fill of the background from each slice border (4-connected).
fn fill_slice_holes(dims: Dims, mask: &mut [bool]) {
    let [d, h, w] = dims.0;
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for z in 0..d {
        let base = z * h * w;
        outside.iter_mut().for_each(|o| *o = false);
        for y in 0..h {
            for x in 0..w {
                if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !mask[base + y * w + x] {
                    outside[y * w + x] = true;
                    stack.push((y, x));
                }
            }
        }
        while let Some((y, x)) = stack.pop() {
            let mut visit = |ny: usize, nx: usize| {
                let k = ny * w + nx;
                if !outside[k] && !mask[base + k] {
                    outside[k] = true;
                    stack.push((ny, nx));
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        for k in 0..h * w {
            if !outside[k] {
                mask[base + k] = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_phantom(hollow: bool) -> Volume {
        Volume::from_fn(Dims::new(16, 16, 16), |z, y, x| {
            let inside = (4..12).contains(&z) && (4..12).contains(&y) && (4..12).contains(&x);
            let cavity = (7..9).contains(&z) && (7..9).contains(&y) && (7..9).contains(&x);
            if inside && !(hollow && cavity) {
                0.5
            } else {
                -1.0
            }
        })
    }

    #[test]
    fn empty_volume_has_no_body() {
        let v = Volume::filled(Dims::new(4, 4, 4), -1.0);
        assert!(matches!(
            compute_body_mask(&v, -0.5),
            Err(Error::NoBodyFound { .. })
        ));
    }

    #[test]
    fn solid_cube_is_exact() {
        let v = cube_phantom(false);
        let m = compute_body_mask(&v, -0.5).unwrap();
        assert_eq!(m.voxel_count(), 512);
        for i in 0..v.data().len() {
            assert_eq!(m.contains(i), v.data()[i] > -0.5);
        }
    }

    #[test]
    fn cavity_is_filled() {
        let v = cube_phantom(true);
        let candidates = v.data().iter().filter(|&&x| x > -0.5).count();
        assert_eq!(candidates, 504);
        let m = compute_body_mask(&v, -0.5).unwrap();
        assert_eq!(m.voxel_count(), 512);
    }

    #[test]
    fn keeps_largest_component_only() {
        let mut v = cube_phantom(false).into_data();
        let dims = Dims::new(16, 16, 16);
        v[dims.index(0, 0, 0)] = 0.9;
        v[dims.index(15, 15, 15)] = 0.9;
        let v = Volume::new(dims, [1.0; 3], [0.0; 3], v).unwrap();
        let m = compute_body_mask(&v, -0.5).unwrap();
        assert_eq!(m.voxel_count(), 512);
        assert!(!m.contains(0));
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let dims = Dims::new(3, 3, 3);
        let mut data = vec![-1.0f32; 27];
        data[dims.index(0, 0, 0)] = 1.0;
        data[dims.index(1, 1, 1)] = 1.0;
        data[dims.index(2, 2, 2)] = 1.0;
        let v = Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap();
        assert_eq!(compute_body_mask(&v, 0.0).unwrap().voxel_count(), 3);
    }
}
