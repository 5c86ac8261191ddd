//! Dense displacement fields: coarse construction from sparse matches,
//! warping, and composition.
//!
//! Convention: `warp(u)` samples the moving data at `u + τ(u)`, with τ in
//! voxel units of the fixed grid and channels ordered (z, y, x).

use rayon::prelude::*;

use crate::embedding::{resample_embedding, EmbeddingVolume};
use crate::error::{check_dims, Error, Result};
use crate::interp;
use crate::labels::LabelVolume;
use crate::matching::MatchSet;
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    /// Channel-major: `data[c·N + voxel]`.
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn zeros(dims: Dims) -> Self {
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![0.0; 3 * dims.len()],
        }
    }

    pub fn constant(dims: Dims, d: [f32; 3]) -> Self {
        let n = dims.len();
        let mut data = Vec::with_capacity(3 * n);
        for v in d {
            data.extend(std::iter::repeat_n(v, n));
        }
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        }
    }

    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::InvalidParameter(format!(
                "field data has {} values, expected 3·{}",
                data.len(),
                dims.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "field contains non-finite values".into(),
            ));
        }
        Ok(DisplacementField {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        })
    }

    /// Field from a function of the voxel position (as f64 coordinates).
    pub fn from_fn(dims: Dims, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        let n = dims.len();
        let vals: Vec<[f64; 3]> = (0..n)
            .into_par_iter()
            .map(|i| f(dims.coords(i).map(|c| c as f64)))
            .collect();
        let mut data = vec![0.0f32; 3 * n];
        for (i, v) in vals.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = v[c] as f32;
            }
        }
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        }
    }

    pub(crate) fn from_f64(dims: Dims, buf: &[f64]) -> Self {
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: buf.iter().map(|&v| v as f32).collect(),
        }
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.dims.len();
        [
            self.data[i] as f64,
            self.data[n + i] as f64,
            self.data[2 * n + i] as f64,
        ]
    }

    /// Trilinear sample of all three channels, border-clamped.
    pub fn sample(&self, pos: [f64; 3]) -> [f64; 3] {
        let n = self.dims.len();
        let s = interp::stencil(self.dims, pos);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let plane = &self.data[c * n..(c + 1) * n];
            for k in 0..8 {
                *o += s.w[k] * plane[s.idx[k]] as f64;
            }
        }
        out
    }

    /// Position `u + τ(u)` sampled by the warp at voxel `i`.
    #[inline]
    pub fn target(&self, i: usize) -> [f64; 3] {
        let c = self.dims.coords(i);
        let d = self.at(i);
        [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]]
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.dims.len())
            .map(|i| {
                let d = self.at(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .collect()
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.norms();
        n.iter().sum::<f64>() / n.len() as f64
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense coarse field from matches taken on the regular fixed grid of `grid_stride`.
///
/// Node displacement is `moving − fixed` (pull-back convention). Nodes without a
/// surviving match take the value of the nearest surviving node; the dense
/// field is trilinear between nodes and clamps beyond the outermost ones.
pub fn build_coarse_field(
    matches: &MatchSet,
    dims: Dims,
    grid_stride: usize,
) -> Result<DisplacementField> {
    if matches.is_empty() {
        return Err(Error::InsufficientCorrespondences { needed: 1, got: 0 });
    }
    if grid_stride == 0 {
        return Err(Error::InvalidParameter("grid stride must be ≥ 1".into()));
    }
    let nodes = Dims(dims.0.map(|n| n.div_ceil(grid_stride)));
    let mut value: Vec<Option<[f64; 3]>> = vec![None; nodes.len()];
    for (f, m) in matches.fixed_points.iter().zip(&matches.moving_points) {
        let mut g = [0usize; 3];
        for a in 0..3 {
            let q = f[a] / grid_stride as f64;
            if f[a] < 0.0 || q.fract() != 0.0 || q as usize >= nodes.0[a] {
                return Err(Error::InvalidParameter(format!(
                    "fixed point {f:?} is not on the stride-{grid_stride} grid of {:?}",
                    dims.0
                )));
            }
            g[a] = q as usize;
        }
        let slot = &mut value[nodes.index(g[0], g[1], g[2])];
        if slot.is_none() {
            *slot = Some([m[0] - f[0], m[1] - f[1], m[2] - f[2]]);
        }
    }
    let known: Vec<(usize, [f64; 3])> = value
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|d| (i, d)))
        .collect();
    let filled: Vec<[f64; 3]> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            if let Some(d) = value[i] {
                return d;
            }
            let c = nodes.coords(i);
            let mut best = (usize::MAX, known[0].1);
            for &(j, d) in &known {
                let k = nodes.coords(j);
                let d2 = (0..3).map(|a| c[a].abs_diff(k[a]).pow(2)).sum::<usize>();
                if d2 < best.0 {
                    best = (d2, d);
                }
            }
            best.1
        })
        .collect();
    let n = nodes.len();
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| (0..n).map(|i| filled[i][c] as f32).collect())
        .collect();
    let inv = 1.0 / grid_stride as f64;
    Ok(DisplacementField::from_fn(dims, |u| {
        let g = u.map(|x| x * inv);
        let s = interp::stencil(nodes, g);
        std::array::from_fn(|c| {
            (0..8)
                .map(|k| s.w[k] * planes[c][s.idx[k]] as f64)
                .sum::<f64>()
        })
    }))
}

/// `output(u) = input(u + τ(u))`, trilinear and border-clamped.
pub fn warp_by_field(v: &Volume, tau: &DisplacementField) -> Result<Volume> {
    check_dims(v.dims().0, tau.dims().0)?;
    let data = (0..tau.dims().len())
        .into_par_iter()
        .map(|i| v.sample(tau.target(i)) as f32)
        .collect();
    Ok(v.like(data))
}

/// Channel-wise trilinear warp of an embedding followed by renormalization.
pub fn warp_embedding_by_field(
    e: &EmbeddingVolume,
    tau: &DisplacementField,
) -> Result<EmbeddingVolume> {
    check_dims(e.dims().0, tau.dims().0)?;
    Ok(resample_embedding(e, tau.dims(), |i| tau.target(i)))
}

/// Nearest-neighbour warp of a label volume.
pub fn warp_labels_by_field(labels: &LabelVolume, tau: &DisplacementField) -> Result<LabelVolume> {
    check_dims(labels.dims().0, tau.dims().0)?;
    let dims = labels.dims();
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| labels.data()[interp::nearest(dims, tau.target(i))])
        .collect();
    LabelVolume::new(dims, data).map(|l| l.with_geometry(labels.spacing(), labels.origin()))
}

/// Total field of two successive warps: `inner(u) + outer(u + inner(u))`.
///
/// Warping by the result is equivalent to warping by `outer` first and then by `inner`.
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    check_dims(outer.dims().0, inner.dims().0)?;
    let dims = inner.dims();
    let n = dims.len();
    let vals: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = inner.at(i);
            let o = outer.sample(inner.target(i));
            [d[0] + o[0], d[1] + o[1], d[2] + o[2]]
        })
        .collect();
    let mut data = vec![0.0f32; 3 * n];
    for (i, v) in vals.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = v[c] as f32;
        }
    }
    Ok(DisplacementField {
        dims,
        spacing: inner.spacing,
        origin: inner.origin,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(pairs: &[([f64; 3], [f64; 3])]) -> MatchSet {
        MatchSet {
            fixed_points: pairs.iter().map(|p| p.0).collect(),
            moving_points: pairs.iter().map(|p| p.1).collect(),
            similarities: vec![1.0; pairs.len()],
            theta: 0.7,
            candidates: pairs.len(),
        }
    }

    #[test]
    fn zero_matches_zero_field() {
        let m = matches(&[([0.0; 3], [0.0; 3]), ([8.0, 8.0, 8.0], [8.0, 8.0, 8.0])]);
        let f = build_coarse_field(&m, Dims::new(16, 16, 16), 8).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_fills_everything() {
        let m = matches(&[([8.0, 8.0, 8.0], [8.0, 8.0, 12.0])]);
        let f = build_coarse_field(&m, Dims::new(20, 20, 20), 8).unwrap();
        for i in 0..f.dims().len() {
            assert_eq!(f.at(i), [0.0, 0.0, 4.0]);
        }
    }

    #[test]
    fn linear_between_adjacent_nodes() {
        let m = matches(&[
            ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            ([0.0, 0.0, 8.0], [0.0, 0.0, 16.0]),
        ]);
        let dims = Dims::new(1, 1, 9);
        let f = build_coarse_field(&m, dims, 8).unwrap();
        assert!((f.at(4)[2] - 4.0).abs() < 1e-6);
        // knots are exact
        assert_eq!(f.at(0)[2], 0.0);
        assert_eq!(f.at(8)[2], 8.0);
    }

    #[test]
    fn off_grid_points_rejected() {
        let m = matches(&[([3.0, 0.0, 0.0], [3.0, 0.0, 0.0])]);
        assert!(build_coarse_field(&m, Dims::new(16, 16, 16), 8).is_err());
    }

    #[test]
    fn zero_field_warps_are_identity() {
        let dims = Dims::new(4, 5, 6);
        let v = Volume::from_fn(dims, |z, y, x| (z * 30 + y * 6 + x) as f32);
        let zero = DisplacementField::zeros(dims);
        assert_eq!(warp_by_field(&v, &zero).unwrap(), v);
        let labels =
            LabelVolume::new(dims, (0..dims.len()).map(|i| (i % 4) as u16).collect()).unwrap();
        assert_eq!(warp_labels_by_field(&labels, &zero).unwrap(), labels);
    }

    #[test]
    fn constant_integer_field_shifts() {
        let dims = Dims::new(3, 3, 8);
        let v = Volume::from_fn(dims, |z, y, x| (z * 100 + y * 10 + x) as f32);
        let tau = DisplacementField::constant(dims, [0.0, 0.0, 2.0]);
        let w = warp_by_field(&v, &tau).unwrap();
        for i in 0..dims.len() {
            let [z, y, x] = dims.coords(i);
            assert_eq!(w.data()[i], v.get(z, y, (x + 2).min(7)));
        }
    }

    #[test]
    fn compose_constants_add() {
        let dims = Dims::new(6, 6, 6);
        let a = DisplacementField::constant(dims, [0.0, 0.0, 1.0]);
        let b = DisplacementField::constant(dims, [0.0, 0.0, 2.0]);
        let c = compose_fields(&a, &b).unwrap();
        for i in 0..dims.len() {
            assert_eq!(c.at(i), [0.0, 0.0, 3.0]);
        }
        let z = compose_fields(&a, &DisplacementField::zeros(dims)).unwrap();
        assert_eq!(z.data(), a.data());
    }

    #[test]
    fn dim_mismatch() {
        let v = Volume::filled(Dims::new(2, 2, 2), 0.0);
        let tau = DisplacementField::zeros(Dims::new(2, 2, 3));
        assert!(matches!(
            warp_by_field(&v, &tau),
            Err(Error::DimMismatch { .. })
        ));
    }
}
