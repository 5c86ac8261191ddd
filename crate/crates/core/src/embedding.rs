//! Per-voxel embedding volumes and the built-in synthetic descriptor.
//!
//! Any C-channel descriptor field can be plugged in (e.g. loaded from `.evol`).
//! Embeddings are unit-normalized on ingest so that inner products are cosine
//! similarities and similarity thresholds are independent of descriptor scale.

use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};
use crate::filter::box_mean;
use crate::interp;
use crate::volume::{Dims, Volume};

/// Minimum channel count accepted by [`synth_descriptors`].
pub const MIN_SYNTH_CHANNELS: usize = 8;
/// Channels produced by [`synth_descriptors`] before padding or truncation.
pub const SYNTH_FEATURES: usize = 16;

const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVolume {
    channels: usize,
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    /// Channel-major: `data[c·N + voxel]`.
    data: Vec<f32>,
    normalized: bool,
    /// Voxels whose zero vector was replaced by the first basis vector.
    replaced: usize,
}

impl EmbeddingVolume {
    pub fn new(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter(
                "embedding needs at least one channel".into(),
            ));
        }
        if data.len() != channels * dims.len() {
            return Err(Error::InvalidParameter(format!(
                "embedding data has {} values, expected {}·{}",
                data.len(),
                channels,
                dims.len()
            )));
        }
        Ok(EmbeddingVolume {
            channels,
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
            normalized: false,
            replaced: 0,
        })
    }

    pub fn with_geometry(mut self, spacing: [f32; 3], origin: [f32; 3]) -> Self {
        self.spacing = spacing;
        self.origin = origin;
        self
    }

    /// Build from voxel-major vectors (`vectors[voxel·C + c]`).
    pub fn from_voxel_major(channels: usize, dims: Dims, vectors: &[f32]) -> Result<Self> {
        if vectors.len() != channels * dims.len() {
            return Err(Error::InvalidParameter(
                "voxel-major buffer has wrong length".into(),
            ));
        }
        let n = dims.len();
        let mut data = vec![0.0f32; vectors.len()];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = vectors[i * channels + c];
            }
        }
        EmbeddingVolume::new(channels, dims, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn replaced_zero_vectors(&self) -> usize {
        self.replaced
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// The C-vector at flat voxel index `i`.
    pub fn vector(&self, i: usize) -> Vec<f32> {
        let n = self.dims.len();
        (0..self.channels).map(|c| self.data[c * n + i]).collect()
    }

    /// Interleaved copy, `out[voxel·C + c]`.
    pub fn to_voxel_major(&self) -> Vec<f32> {
        let n = self.dims.len();
        let c = self.channels;
        let mut out = vec![0.0f32; self.data.len()];
        for ch in 0..c {
            let plane = &self.data[ch * n..(ch + 1) * n];
            for (i, &v) in plane.iter().enumerate() {
                out[i * c + ch] = v;
            }
        }
        out
    }

    pub(crate) fn from_parts(
        channels: usize,
        dims: Dims,
        spacing: [f32; 3],
        origin: [f32; 3],
        data: Vec<f32>,
    ) -> Self {
        EmbeddingVolume {
            channels,
            dims,
            spacing,
            origin,
            data,
            normalized: false,
            replaced: 0,
        }
    }

    /// Checks that every voxel vector has unit norm within tolerance.
    pub fn verify_normalized(&self) -> bool {
        let n = self.dims.len();
        (0..n).all(|i| {
            let s: f64 = (0..self.channels)
                .map(|c| (self.data[c * n + i] as f64).powi(2))
                .sum();
            (s.sqrt() - 1.0).abs() <= NORM_TOL
        })
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Unnormalized)
        }
    }
}

/// Per-voxel L2 normalization; zero vectors become the first basis vector.
pub fn normalize_embedding(e: &EmbeddingVolume) -> EmbeddingVolume {
    let n = e.dims.len();
    let c = e.channels;
    let norms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..c)
                .map(|ch| (e.data[ch * n + i] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut data = e.data.clone();
    let mut replaced = 0;
    for (i, &norm) in norms.iter().enumerate() {
        if norm > 1e-12 {
            for ch in 0..c {
                data[ch * n + i] = (e.data[ch * n + i] as f64 / norm) as f32;
            }
        } else {
            replaced += 1;
            for ch in 0..c {
                data[ch * n + i] = if ch == 0 { 1.0 } else { 0.0 };
            }
        }
    }
    EmbeddingVolume {
        data,
        normalized: true,
        replaced,
        ..e.clone()
    }
}

// Channel weights and offsets of the synthetic descriptor, set so that each
// group has roughly unit spread inside a body windowed to [-1, 1]. Without the
// offsets every tissue voxel points the same way and cosine similarity stops
// discriminating.
const BIAS: f64 = 0.1;
const MEAN_REF: f64 = 0.2;
const W_MEAN: f64 = 3.5;
const SPREAD_REF: f64 = 0.25;
const W_SPREAD: f64 = 5.0;
const W_COORD: f64 = 1.5;
const W_GRAD: f64 = 6.0;

/// Deterministic multi-scale descriptor standing in for a learned embedding.
///
/// Channel layout before padding/truncation to `channels`:
///
/// | channel | content                                         |
/// |---------|-------------------------------------------------|
/// | 0       | constant bias                                   |
/// | 1–3     | local mean minus a tissue offset, radii 1, 2, 4 |
/// | 4–6     | local spread (√variance) minus an offset, radii 1, 2, 4 |
/// | 7–9     | absolute (z, y, x) coordinate scaled to [0, 1]  |
/// | 10–12   | central-difference gradient of the image        |
/// | 13–15   | central-difference gradient (step 2) of the r=2 mean |
///
/// Extra channels are zero; the result is unit-normalized.
pub fn synth_descriptors(v: &Volume, channels: usize) -> Result<EmbeddingVolume> {
    if channels < MIN_SYNTH_CHANNELS {
        return Err(Error::InvalidParameter(format!(
            "synthetic descriptors need at least {MIN_SYNTH_CHANNELS} channels, got {channels}"
        )));
    }
    let dims = v.dims();
    let n = dims.len();
    let img: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let sq: Vec<f64> = img.iter().map(|x| x * x).collect();

    let mut features: Vec<Vec<f64>> = Vec::with_capacity(SYNTH_FEATURES);
    features.push(vec![BIAS; n]);
    let radii = [1usize, 2, 4];
    let means: Vec<Vec<f64>> = radii.iter().map(|&r| box_mean(&img, dims, r)).collect();
    for m in &means {
        features.push(m.iter().map(|x| W_MEAN * (x - MEAN_REF)).collect());
    }
    for (k, &r) in radii.iter().enumerate() {
        let m2 = box_mean(&sq, dims, r);
        features.push(
            m2.iter()
                .zip(&means[k])
                .map(|(e2, m)| W_SPREAD * ((e2 - m * m).max(0.0).sqrt() - SPREAD_REF))
                .collect(),
        );
    }
    for axis in 0..3 {
        let len = dims.0[axis];
        let denom = if len > 1 { (len - 1) as f64 } else { 1.0 };
        features.push(
            (0..n)
                .map(|i| W_COORD * dims.coords(i)[axis] as f64 / denom)
                .collect(),
        );
    }
    for axis in 0..3 {
        features.push(central_difference(&img, dims, axis, 1));
    }
    for axis in 0..3 {
        features.push(central_difference(&means[1], dims, axis, 2));
    }
    debug_assert_eq!(features.len(), SYNTH_FEATURES);

    let mut data = vec![0.0f32; channels * n];
    for (c, f) in features.iter().take(channels).enumerate() {
        for (dst, &src) in data[c * n..(c + 1) * n].iter_mut().zip(f) {
            *dst = src as f32;
        }
    }
    let raw = EmbeddingVolume::from_parts(channels, dims, v.spacing(), v.origin(), data);
    Ok(normalize_embedding(&raw))
}

fn central_difference(data: &[f64], dims: Dims, axis: usize, step: usize) -> Vec<f64> {
    let len = dims.0[axis];
    let stride = dims.stride(axis);
    (0..data.len())
        .map(|i| {
            let c = dims.coords(i)[axis];
            let lo = c.saturating_sub(step);
            let hi = (c + step).min(len - 1);
            if hi == lo {
                return 0.0;
            }
            let base = i - c * stride;
            W_GRAD * (data[base + hi * stride] - data[base + lo * stride]) / (hi - lo) as f64
        })
        .collect()
}

/// Channel-wise trilinear resampling at arbitrary positions, then renormalization.
pub(crate) fn resample_embedding(
    e: &EmbeddingVolume,
    out_dims: Dims,
    position: impl Fn(usize) -> [f64; 3] + Sync,
) -> EmbeddingVolume {
    let c = e.channels;
    let n_in = e.dims.len();
    let n_out = out_dims.len();
    let vm: Vec<f32> = (0..n_out)
        .into_par_iter()
        .flat_map_iter(|i| {
            let s = interp::stencil(e.dims, position(i));
            (0..c).map(move |ch| {
                let plane = &e.data[ch * n_in..(ch + 1) * n_in];
                let mut acc = 0.0f64;
                for k in 0..8 {
                    acc += s.w[k] * plane[s.idx[k]] as f64;
                }
                acc as f32
            })
        })
        .collect();
    let mut data = vec![0.0f32; c * n_out];
    for i in 0..n_out {
        for ch in 0..c {
            data[ch * n_out + i] = vm[i * c + ch];
        }
    }
    let raw = EmbeddingVolume::from_parts(c, out_dims, e.spacing, e.origin, data);
    normalize_embedding(&raw)
}

/// Inner product of the vectors at `i` in `a` and `j` in `b`.
pub fn similarity_at(a: &EmbeddingVolume, i: usize, b: &EmbeddingVolume, j: usize) -> f64 {
    let (na, nb) = (a.dims.len(), b.dims.len());
    (0..a.channels)
        .map(|c| a.data[c * na + i] as f64 * b.data[c * nb + j] as f64)
        .sum()
}

/// Voxelwise cosine similarity map of two normalized embeddings.
pub fn similarity_map(a: &EmbeddingVolume, b: &EmbeddingVolume) -> Result<Vec<f64>> {
    check_dims(a.dims.0, b.dims.0)?;
    if a.channels != b.channels {
        return Err(Error::InvalidParameter(format!(
            "channel mismatch: {} vs {}",
            a.channels, b.channels
        )));
    }
    Ok((0..a.dims.len())
        .into_par_iter()
        .map(|i| similarity_at(a, i, b, i))
        .collect())
}
