//! 27-channel embedding correlation over a fixed displacement set.

use rayon::prelude::*;

use crate::embedding::EmbeddingVolume;
use crate::error::{check_dims, Error, Result};
use crate::volume::Dims;

pub const CORRELATION_CHANNELS: usize = 27;

/// Index of the zero displacement.
pub const CENTER_CHANNEL: usize = 13;

/// `⟨S_f(u), S_m(u + d)⟩` for `d ∈ {−r, 0, r}³`, channel-major; channel
/// `9·iz + 3·iy + ix` holds the offset `(r·(iz−1), r·(iy−1), r·(ix−1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFeature {
    dims: Dims,
    radius: usize,
    data: Vec<f32>,
}

impl CorrelationFeature {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[k * n..(k + 1) * n]
    }

    /// Voxel offset (z, y, x) of channel `k`.
    pub fn displacement(&self, k: usize) -> [isize; 3] {
        offset(k, self.radius)
    }

    /// Displacement of the strongest channel at voxel `i`; ties go to the lower channel.
    pub fn argmax_displacement(&self, i: usize) -> [isize; 3] {
        let n = self.dims.len();
        let mut best = (0, f32::NEG_INFINITY);
        for k in 0..CORRELATION_CHANNELS {
            let v = self.data[k * n + i];
            if v > best.1 {
                best = (k, v);
            }
        }
        self.displacement(best.0)
    }
}

fn offset(k: usize, r: usize) -> [isize; 3] {
    let r = r as isize;
    [
        (k / 9) as isize - 1,
        (k / 3 % 3) as isize - 1,
        (k % 3) as isize - 1,
    ]
    .map(|s| s * r)
}

/// Correlation of the fixed embedding with the moving one shifted by each
/// displacement, sampling out-of-bounds positions at the clamped border voxel.
pub fn correlation_feature(
    sf: &EmbeddingVolume,
    sm: &EmbeddingVolume,
    radius: usize,
) -> Result<CorrelationFeature> {
    check_dims(sf.dims().0, sm.dims().0)?;
    sf.require_normalized()?;
    sm.require_normalized()?;
    if sf.channels() != sm.channels() {
        return Err(Error::InvalidParameter(format!(
            "channel mismatch: {} vs {}",
            sf.channels(),
            sm.channels()
        )));
    }
    let dims = sf.dims();
    let n = dims.len();
    let c = sf.channels();
    let (a, b) = (sf.data(), sm.data());
    let offsets: Vec<[isize; 3]> = (0..CORRELATION_CHANNELS)
        .map(|k| offset(k, radius))
        .collect();
    let per: Vec<[f32; CORRELATION_CHANNELS]> = (0..n)
        .into_par_iter()
        .map(|u| {
            let p = dims.coords(u);
            let mut out = [0.0f32; CORRELATION_CHANNELS];
            for (k, d) in offsets.iter().enumerate() {
                let q: [usize; 3] = std::array::from_fn(|ax| {
                    (p[ax] as isize + d[ax]).clamp(0, dims.0[ax] as isize - 1) as usize
                });
                let j = dims.index(q[0], q[1], q[2]);
                let s: f64 = (0..c)
                    .map(|ch| a[ch * n + u] as f64 * b[ch * n + j] as f64)
                    .sum();
                out[k] = s as f32;
            }
            out
        })
        .collect();
    let mut data = vec![0.0f32; CORRELATION_CHANNELS * n];
    for (u, v) in per.iter().enumerate() {
        for k in 0..CORRELATION_CHANNELS {
            data[k * n + u] = v[k];
        }
    }
    Ok(CorrelationFeature { dims, radius, data })
}
