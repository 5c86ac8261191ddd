//! Least-squares affine estimation from point correspondences, and affine warping.
//!
//! The fitted matrix maps homogeneous moving-space voxel coordinates onto
//! fixed-space coordinates. Warping is pull-back: the output voxel `u` (fixed
//! grid) samples the moving image at `A⁻¹·u`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use crate::embedding::{resample_embedding, EmbeddingVolume};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::matching::MatchSet;
use crate::volume::{Dims, Volume};

const MIN_DET: f64 = 1e-8;
const RANK_TOL: f64 = 1e-8;

/// 4×4 homogeneous affine matrix with last row (0, 0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 4]; 4],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        AffineTransform { m }
    }

    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParameter(format!(
                "affine last row must be (0, 0, 0, 1), got {:?}",
                m[3]
            )));
        }
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "affine matrix has non-finite entries".into(),
            ));
        }
        Ok(AffineTransform { m })
    }

    /// From a linear part and translation.
    pub fn from_parts(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&linear[r]);
            m[r][3] = translation[r];
        }
        m[3][3] = 1.0;
        AffineTransform { m }
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.m
    }

    pub fn linear(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn det(&self) -> f64 {
        self.linear().determinant()
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| {
            self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3]
        })
    }

    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[r][k] * inner.m[k][c]).sum();
            }
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.det();
        if !(det.abs() > MIN_DET) {
            return Err(Error::SingularTransform { det });
        }
        let inv = self
            .linear()
            .try_inverse()
            .ok_or(Error::SingularTransform { det })?;
        let t = Vector3::from(self.translation());
        let ti = -(inv * t);
        let linear = std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]));
        Ok(AffineTransform::from_parts(linear, [ti[0], ti[1], ti[2]]))
    }

    /// Pull-back displacement field on `dims`: τ(u) = A⁻¹·u − u.
    pub fn to_field(&self, dims: Dims) -> Result<DisplacementField> {
        let inv = self.inverse()?;
        Ok(DisplacementField::from_fn(dims, |u| {
            let p = inv.apply(u);
            [p[0] - u[0], p[1] - u[1], p[2] - u[2]]
        }))
    }

    /// 16 whitespace-separated decimals, row-major, one row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.m {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<AffineTransform> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::header("affine", format!("cannot parse `{t}`")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(Error::header(
                "affine",
                format!("expected 16 values, found {}", vals.len()),
            ));
        }
        let m = std::array::from_fn(|r| std::array::from_fn(|c| vals[r * 4 + c]));
        AffineTransform::from_matrix(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<AffineTransform> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AffineTransform::parse(&text)
    }
}

/// Result of [`fit_affine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    /// Root-mean-square of ‖A·p_m − p_f‖ over the k pairs, in voxels.
    pub residual_rms: f64,
    pub k: usize,
}

fn centered(points: &[[f64; 3]]) -> ([f64; 3], DMatrix<f64>) {
    let k = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mat = DMatrix::from_fn(points.len(), 3, |r, c| points[r][c] - mean[c]);
    (mean, mat)
}

fn full_rank(mat: &DMatrix<f64>) -> bool {
    let sv = mat.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.min() > RANK_TOL * max
}

/// Unweighted least-squares affine `argmin_A ‖A·P̃_m − P̃_f‖²_F`.
///
/// Coordinates are centered first; the 3×3 linear block is then solved with a
/// Householder QR of the centered moving coordinates, and the translation
/// follows from the centroids.
pub fn fit_affine(matches: &MatchSet) -> Result<AffineFit> {
    let k = matches.len();
    if k < 4 {
        return Err(Error::InsufficientCorrespondences { needed: 4, got: k });
    }
    let (mean_f, cf) = centered(&matches.fixed_points);
    let (mean_m, cm) = centered(&matches.moving_points);
    if !full_rank(&cf) {
        return Err(Error::DegenerateConfiguration(
            "fixed points are coplanar or collinear".into(),
        ));
    }
    if !full_rank(&cm) {
        return Err(Error::DegenerateConfiguration(
            "moving points are coplanar or collinear".into(),
        ));
    }
    let qr = cm.qr();
    let rhs = qr.q().transpose() * &cf;
    let lt = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::DegenerateConfiguration("triangular factor is singular".into()))?;
    // cm · Lᵀ ≈ cf
    let linear: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| lt[(c, r)]));
    let translation: [f64; 3] =
        std::array::from_fn(|r| mean_f[r] - (0..3).map(|c| linear[r][c] * mean_m[c]).sum::<f64>());
    let transform = AffineTransform::from_parts(linear, translation);
    let sq: f64 = matches
        .moving_points
        .iter()
        .zip(&matches.fixed_points)
        .map(|(m, f)| {
            let p = transform.apply(*m);
            (0..3).map(|a| (p[a] - f[a]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(AffineFit {
        transform,
        residual_rms: (sq / k as f64).sqrt(),
        k,
    })
}

/// `output(u) = input(A⁻¹·u)` on the input grid, trilinear and border-clamped.
pub fn apply_affine(v: &Volume, a: &AffineTransform) -> Result<Volume> {
    let inv = a.inverse()?;
    let dims = v.dims();
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let c = dims.coords(i);
            v.sample(inv.apply(c.map(|x| x as f64))) as f32
        })
        .collect();
    Ok(v.like(data))
}

/// Channel-wise affine warp of an embedding followed by renormalization.
pub fn apply_affine_embedding(e: &EmbeddingVolume, a: &AffineTransform) -> Result<EmbeddingVolume> {
    let inv = a.inverse()?;
    let dims = e.dims();
    Ok(resample_embedding(e, dims, |i| {
        inv.apply(dims.coords(i).map(|x| x as f64))
    }))
}
