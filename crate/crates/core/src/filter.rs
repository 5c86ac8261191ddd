//! Separable box filters over clipped windows.

use rayon::prelude::*;

use crate::volume::Dims;

/// Sum over the (2r+1)³ window around each voxel, restricted to in-bounds voxels.
///
/// Summation is direct per axis (no running prefix sums), so results do not
/// depend on where in the volume the window sits.
pub(crate) fn box_sum(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = dims.0[axis];
        let stride = dims.stride(axis);
        let src = &cur;
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let c = dims.coords(i)[axis];
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(n - 1);
            let base = i - c * stride;
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += src[base + k * stride];
            }
            *out = acc;
        });
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Number of in-bounds voxels in the clipped window around voxel `i`.
#[inline]
pub(crate) fn window_count(dims: Dims, i: usize, r: usize) -> usize {
    let c = dims.coords(i);
    (0..3)
        .map(|a| (c[a] + r).min(dims.0[a] - 1) + 1 - c[a].saturating_sub(r))
        .product()
}

/// Clipped-window mean.
pub(crate) fn box_mean(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut s = box_sum(data, dims, r);
    for (i, v) in s.iter_mut().enumerate() {
        *v /= window_count(dims, i, r) as f64;
    }
    s
}
