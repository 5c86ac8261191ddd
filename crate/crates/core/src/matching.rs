//! Point correspondence by embedding similarity.
//!
//! A fixed-image query vector is compared against every voxel of a
//! stride-decimated moving embedding; the coarse winner is then refined by an
//! exhaustive full-resolution search over its (2·stride+1)³ neighbourhood.
//! Ties go to the smaller z-major linear index.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVolume;
use crate::error::{check_dims, Error, Result};
use crate::mask::BodyMask;

/// Matched fixed/moving voxel coordinates with their similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub fixed_points: Vec<[f64; 3]>,
    pub moving_points: Vec<[f64; 3]>,
    pub similarities: Vec<f32>,
    /// Threshold used to produce the set.
    pub theta: f32,
    /// Number of query points before threshold filtering.
    pub candidates: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.fixed_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed_points.is_empty()
    }

    /// Per-pair displacement `moving − fixed`.
    pub fn offsets(&self) -> Vec<[f64; 3]> {
        self.fixed_points
            .iter()
            .zip(&self.moving_points)
            .map(|(f, m)| [m[0] - f[0], m[1] - f[1], m[2] - f[2]])
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for i in 0..self.len() {
            let f = self.fixed_points[i];
            let m = self.moving_points[i];
            w.serialize(MatchRow {
                fz: f[0],
                fy: f[1],
                fx: f[2],
                mz: m[0],
                my: m[1],
                mx: m[2],
                similarity: self.similarities[i],
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<MatchSet> {
        let mut r = csv::Reader::from_path(path)?;
        let mut set = MatchSet {
            fixed_points: Vec::new(),
            moving_points: Vec::new(),
            similarities: Vec::new(),
            theta: f32::NEG_INFINITY,
            candidates: 0,
        };
        for row in r.deserialize() {
            let row: MatchRow = row?;
            set.fixed_points.push([row.fz, row.fy, row.fx]);
            set.moving_points.push([row.mz, row.my, row.mx]);
            set.similarities.push(row.similarity);
        }
        set.candidates = set.len();
        set.theta = set
            .similarities
            .iter()
            .copied()
            .fold(f32::INFINITY, f32::min)
            .min(1.0);
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchRow {
    fz: f64,
    fy: f64,
    fx: f64,
    mz: f64,
    my: f64,
    mx: f64,
    similarity: f32,
}

/// Decimated candidates refined at full resolution when not configured.
pub const DEFAULT_REFINE_CANDIDATES: usize = 32;

/// Parameters of grid matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub grid_stride: usize,
    pub search_stride: usize,
    pub theta: f32,
    /// Number of best decimated candidates whose neighborhoods are refined.
    pub refine_candidates: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            grid_stride: 8,
            search_stride: 4,
            theta: 0.7,
            refine_candidates: DEFAULT_REFINE_CANDIDATES,
        }
    }
}

/// Search structure over a target embedding: interleaved copy plus the
/// decimated voxel list.
struct Target<'a> {
    emb: &'a EmbeddingVolume,
    interleaved: Vec<f32>,
    stride: usize,
    coarse_idx: Vec<usize>,
    coarse: Vec<f32>,
}

impl<'a> Target<'a> {
    fn new(emb: &'a EmbeddingVolume, stride: usize) -> Result<Self> {
        let dims = emb.dims();
        if stride == 0 || dims.0.iter().all(|&n| stride > n) {
            return Err(Error::InvalidParameter(format!(
                "search stride {stride} invalid for target dims {:?}",
                dims.0
            )));
        }
        let c = emb.channels();
        let interleaved = emb.to_voxel_major();
        let mut coarse_idx = Vec::new();
        for z in (0..dims.0[0]).step_by(stride) {
            for y in (0..dims.0[1]).step_by(stride) {
                for x in (0..dims.0[2]).step_by(stride) {
                    coarse_idx.push(dims.index(z, y, x));
                }
            }
        }
        let mut coarse = Vec::with_capacity(coarse_idx.len() * c);
        for &i in &coarse_idx {
            coarse.extend_from_slice(&interleaved[i * c..(i + 1) * c]);
        }
        Ok(Target {
            emb,
            interleaved,
            stride,
            coarse_idx,
            coarse,
        })
    }

    fn find(&self, query: &[f32], candidates: usize) -> ([usize; 3], f64) {
        let c = self.emb.channels();
        let dims = self.emb.dims();
        let mut scored: Vec<(f64, usize)> = self
            .coarse
            .chunks_exact(c)
            .zip(&self.coarse_idx)
            .map(|(v, &i)| (dot(query, v), i))
            .collect();
        let better = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let k = candidates.clamp(1, scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, better);
            scored.truncate(k);
        }
        scored.sort_unstable_by(better);
        let r = self.stride;
        let mut fine = (usize::MAX, f64::NEG_INFINITY);
        for &(_, winner) in &scored {
            let center = dims.coords(winner);
            for z in center[0].saturating_sub(r)..=(center[0] + r).min(dims.0[0] - 1) {
                for y in center[1].saturating_sub(r)..=(center[1] + r).min(dims.0[1] - 1) {
                    for x in center[2].saturating_sub(r)..=(center[2] + r).min(dims.0[2] - 1) {
                        let i = dims.index(z, y, x);
                        let s = dot(query, &self.interleaved[i * c..(i + 1) * c]);
                        if s > fine.1 || (s == fine.1 && i < fine.0) {
                            fine = (i, s);
                        }
                    }
                }
            }
        }
        (dims.coords(fine.0), fine.1)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Best-matching voxel of `target` for a unit query vector.
///
/// The decimated target (every `stride`-th voxel) is scored first; the
/// full-resolution (2·stride+1)³ neighborhoods of the best
/// [`DEFAULT_REFINE_CANDIDATES`] decimated voxels are then searched
/// exhaustively. Ties go to the smaller linear index.
pub fn match_point(
    query: &[f32],
    target: &EmbeddingVolume,
    stride: usize,
) -> Result<([usize; 3], f64)> {
    if query.len() != target.channels() {
        return Err(Error::InvalidParameter(format!(
            "query has {} channels, target {}",
            query.len(),
            target.channels()
        )));
    }
    target.require_normalized()?;
    Ok(Target::new(target, stride)?.find(query, DEFAULT_REFINE_CANDIDATES))
}

/// Regular fixed-image grid (every `stride`-th voxel per axis, from 0) restricted to `mask`.
pub fn grid_points(mask: &BodyMask, stride: usize) -> Vec<[usize; 3]> {
    let dims = mask.dims();
    let mut pts = Vec::new();
    for z in (0..dims.0[0]).step_by(stride.max(1)) {
        for y in (0..dims.0[1]).step_by(stride.max(1)) {
            for x in (0..dims.0[2]).step_by(stride.max(1)) {
                if mask.contains(dims.index(z, y, x)) {
                    pts.push([z, y, x]);
                }
            }
        }
    }
    pts
}

/// Match the given fixed voxels into `moving` and drop pairs below `theta`.
pub fn match_points(
    fixed: &EmbeddingVolume,
    moving: &EmbeddingVolume,
    points: &[[usize; 3]],
    params: &MatchParams,
) -> Result<MatchSet> {
    let theta = params.theta;
    fixed.require_normalized()?;
    moving.require_normalized()?;
    if fixed.channels() != moving.channels() {
        return Err(Error::InvalidParameter(format!(
            "channel mismatch: fixed {} vs moving {}",
            fixed.channels(),
            moving.channels()
        )));
    }
    let fdims = fixed.dims();
    for p in points {
        if (0..3).any(|a| p[a] >= fdims.0[a]) {
            return Err(Error::InvalidParameter(format!(
                "point {p:?} outside fixed volume"
            )));
        }
    }
    let target = Target::new(moving, params.search_stride)?;
    let found: Vec<([usize; 3], f64)> = points
        .par_iter()
        .map(|p| {
            let q = fixed.vector(fdims.index(p[0], p[1], p[2]));
            target.find(&q, params.refine_candidates)
        })
        .collect();
    let mut set = MatchSet {
        fixed_points: Vec::new(),
        moving_points: Vec::new(),
        similarities: Vec::new(),
        theta,
        candidates: points.len(),
    };
    for (p, (m, s)) in points.iter().zip(found) {
        let s = s.clamp(-1.0, 1.0) as f32;
        if s >= theta {
            set.fixed_points.push(p.map(|v| v as f64));
            set.moving_points.push(m.map(|v| v as f64));
            set.similarities.push(s);
        }
    }
    if set.is_empty() {
        return Err(Error::NoConfidentCorrespondences {
            candidates: points.len(),
            theta,
        });
    }
    Ok(set)
}

/// Grid sampling inside the mask, matching, and similarity filtering.
pub fn grid_match(
    fixed: &EmbeddingVolume,
    moving: &EmbeddingVolume,
    mask: &BodyMask,
    params: &MatchParams,
) -> Result<MatchSet> {
    check_dims(fixed.dims().0, mask.dims().0)?;
    if params.grid_stride == 0 {
        return Err(Error::InvalidParameter("grid stride must be ≥ 1".into()));
    }
    let points = grid_points(mask, params.grid_stride);
    if points.is_empty() {
        return Err(Error::NoConfidentCorrespondences {
            candidates: 0,
            theta: params.theta,
        });
    }
    match_points(fixed, moving, &points, params)
}

/// Brute-force argmax over every voxel; exposed for validation.
pub fn brute_force_match(query: &[f32], target: &EmbeddingVolume) -> ([usize; 3], f64) {
    let n = target.dims().len();
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let s: f64 = (0..target.channels())
            .map(|c| query[c] as f64 * target.data()[c * n + i] as f64)
            .sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    (target.dims().coords(best.0), best.1)
}
