//! Deformable stage: direct multi-resolution optimization of a dense
//! displacement field against local NCC, an embedding-similarity term and a
//! smoothness penalty.
//!
//! The moving image and embedding handed to [`optimize_field`] are assumed to
//! be already affine/coarse aligned; the returned field is relative to them.

mod correlation;
mod loss;
mod pyramid;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVolume;
use crate::error::{check_dims, Error, Result};
use crate::field::DisplacementField;
use crate::mask::BodyMask;
use crate::volume::{Dims, Volume};

pub use correlation::{
    correlation_feature, CorrelationFeature, CENTER_CHANNEL, CORRELATION_CHANNELS,
};
pub use loss::{local_ncc_loss, sam_loss, smoothness_loss, NCC_EPS};

/// Levels are only added while every axis of the finer level has at least this many voxels.
const MIN_PYRAMID_EXTENT: usize = 8;
/// A step that raises the loss by more than this fraction of the best value
/// is undone and the step size halved.
const BACKTRACK_REL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-12;
const FD_STEP: f64 = 1e-3;

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Weight of the embedding term.
    pub lambda: f64,
    /// Weight of the smoothness term.
    pub gamma: f64,
    /// NCC window radius at the coarsest level.
    pub ncc_radius_coarse: usize,
    /// NCC window radius at full resolution.
    pub ncc_radius_fine: usize,
    /// Iteration caps, coarsest level first; the last entry repeats.
    pub max_iterations: Vec<usize>,
    /// Stop a level when the best loss improved by less than this relative
    /// amount over the last `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub momentum: f64,
    /// Largest per-voxel displacement change of the first step, in voxels.
    pub max_first_step: f64,
    /// Initialize the coarsest level from the per-voxel argmax of the
    /// correlation feature.
    pub correlation_seed: bool,
}

impl Default for OptParams {
    fn default() -> Self {
        OptParams {
            levels: 3,
            lambda: 1.0,
            gamma: 0.5,
            ncc_radius_coarse: 2,
            ncc_radius_fine: 4,
            max_iterations: vec![150, 80, 40],
            tolerance: 1e-4,
            patience: 10,
            momentum: 0.9,
            max_first_step: 0.5,
            correlation_seed: false,
        }
    }
}

impl OptParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.levels == 0 {
            return bad("pyramid needs at least one level");
        }
        if self.ncc_radius_coarse == 0 || self.ncc_radius_fine == 0 {
            return bad("NCC window radius must be ≥ 1");
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.max_iterations.is_empty() {
            return bad("max_iterations must list at least one cap");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.max_first_step > 0.0) {
            return bad("max_first_step must be positive");
        }
        if !(self.tolerance >= 0.0) || self.patience == 0 {
            return bad("tolerance must be ≥ 0 and patience ≥ 1");
        }
        Ok(())
    }

    fn radius(&self, level: usize, levels: usize) -> usize {
        if levels == 1 {
            return self.ncc_radius_fine;
        }
        let (f, c) = (self.ncc_radius_fine as f64, self.ncc_radius_coarse as f64);
        (f + (c - f) * level as f64 / (levels - 1) as f64).round() as usize
    }

    fn iterations(&self, level: usize, levels: usize) -> usize {
        let k = levels - 1 - level;
        *self
            .max_iterations
            .get(k)
            .or(self.max_iterations.last())
            .unwrap_or(&0)
    }
}

/// Loss terms at one iterate. `ncc` is the minimized term `1 − mean CC²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    /// Pyramid level, 0 = full resolution.
    pub level: usize,
    pub ncc: f64,
    pub sam: f64,
    pub smooth: f64,
    pub total: f64,
}

/// One of the three loss terms, for [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Ncc,
    Sam,
    Smoothness,
}

#[derive(Debug, Clone, Copy)]
struct Weights {
    ncc: f64,
    sam: f64,
    smooth: f64,
}

#[derive(Debug, Clone, Copy)]
struct Terms {
    ncc: f64,
    sam: f64,
    smooth: f64,
}

impl Terms {
    fn total(&self, w: Weights) -> f64 {
        w.ncc * self.ncc + w.sam * self.sam + w.smooth * self.smooth
    }
}

/// Inputs of the loss at one resolution.
#[derive(Debug, Clone)]
pub struct LossInputs {
    dims: Dims,
    fixed: Vec<f64>,
    moving: Vec<f32>,
    channels: usize,
    /// Voxel-major embeddings.
    sf: Vec<f32>,
    sm: Vec<f32>,
    mask: Vec<bool>,
    count: usize,
    radius: usize,
}

impl LossInputs {
    pub fn new(
        fixed: &Volume,
        moving: &Volume,
        sf: &EmbeddingVolume,
        sm: &EmbeddingVolume,
        mask: &BodyMask,
        ncc_radius: usize,
    ) -> Result<Self> {
        let dims = fixed.dims();
        check_dims(dims.0, moving.dims().0)?;
        check_dims(dims.0, sf.dims().0)?;
        check_dims(dims.0, sm.dims().0)?;
        check_dims(dims.0, mask.dims().0)?;
        sf.require_normalized()?;
        sm.require_normalized()?;
        if sf.channels() != sm.channels() {
            return Err(Error::InvalidParameter(format!(
                "channel mismatch: fixed {} vs moving {}",
                sf.channels(),
                sm.channels()
            )));
        }
        if mask.voxel_count() == 0 {
            return Err(Error::InvalidParameter("body mask is empty".into()));
        }
        if ncc_radius == 0 {
            return Err(Error::InvalidParameter(
                "NCC window radius must be ≥ 1".into(),
            ));
        }
        Ok(LossInputs {
            dims,
            fixed: fixed.data().iter().map(|&v| v as f64).collect(),
            moving: moving.data().to_vec(),
            channels: sf.channels(),
            sf: sf.to_voxel_major(),
            sm: sm.to_voxel_major(),
            mask: mask.data().to_vec(),
            count: mask.voxel_count(),
            radius: ncc_radius,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Next coarser level (2× block average) with the given NCC radius.
    fn coarser(&self, radius: usize) -> LossInputs {
        let fixed32: Vec<f32> = self.fixed.iter().map(|&v| v as f32).collect();
        let (fixed, dims) = pyramid::downsample_scalar(&fixed32, self.dims);
        let (moving, _) = pyramid::downsample_scalar(&self.moving, self.dims);
        let (sf, _) = pyramid::downsample_vectors(&self.sf, self.channels, self.dims);
        let (sm, _) = pyramid::downsample_vectors(&self.sm, self.channels, self.dims);
        let full = BodyMask::from_data(self.dims, self.mask.clone()).expect("mask matches dims");
        let mask = full.downsample(dims);
        LossInputs {
            dims,
            fixed: fixed.iter().map(|&v| v as f64).collect(),
            moving,
            channels: self.channels,
            sf,
            sm,
            count: mask.voxel_count(),
            mask: mask.data().to_vec(),
            radius,
        }
    }

    fn eval(&self, tau: &[f64], w: Weights, grad: bool) -> (Terms, Option<Vec<f64>>) {
        let n = self.dims.len();
        let (j, jgrad) = loss::warp_with_grad(&self.moving, self.dims, tau);
        let (sim, gj) = loss::ncc_similarity(
            &self.fixed,
            &j,
            self.dims,
            &self.mask,
            self.count,
            self.radius,
            grad && w.ncc != 0.0,
        );
        let mut g = grad.then(|| vec![0.0; 3 * n]);
        if let (Some(g), Some(gj)) = (g.as_mut(), gj) {
            for a in 0..3 {
                for v in 0..n {
                    g[a * n + v] = -w.ncc * gj[v] * jgrad[a * n + v];
                }
            }
        }
        let sam = loss::sam_term(
            &self.sf,
            &self.sm,
            self.channels,
            self.dims,
            tau,
            &self.mask,
            self.count,
            g.as_deref_mut()
                .filter(|_| w.sam != 0.0)
                .map(|g| (g, w.sam)),
        );
        let smooth = loss::smoothness(
            tau,
            self.dims,
            &self.mask,
            self.count,
            g.as_deref_mut()
                .filter(|_| w.smooth != 0.0)
                .map(|g| (g, w.smooth)),
        );
        (
            Terms {
                ncc: 1.0 - sim,
                sam,
                smooth,
            },
            g,
        )
    }

    /// All terms at `tau` with the given weights.
    pub fn evaluate(&self, tau: &DisplacementField, lambda: f64, gamma: f64) -> Result<LossReport> {
        check_dims(self.dims.0, tau.dims().0)?;
        let w = Weights {
            ncc: 1.0,
            sam: lambda,
            smooth: gamma,
        };
        let (t, _) = self.eval(&tau.to_f64(), w, false);
        Ok(report(0, 0, t, w))
    }

    /// Analytic gradient of the weighted total loss, channel-major.
    pub fn gradient(&self, tau: &DisplacementField, lambda: f64, gamma: f64) -> Result<Vec<f64>> {
        check_dims(self.dims.0, tau.dims().0)?;
        let w = Weights {
            ncc: 1.0,
            sam: lambda,
            smooth: gamma,
        };
        Ok(self
            .eval(&tau.to_f64(), w, true)
            .1
            .expect("gradient requested"))
    }
}

fn report(level: usize, iteration: usize, t: Terms, w: Weights) -> LossReport {
    LossReport {
        iteration,
        level,
        ncc: t.ncc,
        sam: t.sam,
        smooth: t.smooth,
        total: t.total(w),
    }
}

fn max_norm(g: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| (g[i] * g[i] + g[n + i] * g[n + i] + g[2 * n + i] * g[2 * n + i]).sqrt())
        .fold(0.0, f64::max)
}

/// Momentum gradient descent on one level, starting from `tau`; returns the best iterate.
fn descend(
    inputs: &LossInputs,
    level: usize,
    mut tau: Vec<f64>,
    params: &OptParams,
    max_iter: usize,
    history: &mut Vec<LossReport>,
) -> std::result::Result<Vec<f64>, (usize, Vec<f64>)> {
    let w = Weights {
        ncc: 1.0,
        sam: params.lambda,
        smooth: params.gamma,
    };
    let n = inputs.dims.len();
    let (t, g) = inputs.eval(&tau, w, true);
    let mut g = g.expect("gradient requested");
    let first = report(level, 0, t, w);
    history.push(first);
    if !first.total.is_finite() {
        return Err((0, tau));
    }
    let gmax = max_norm(&g, n);
    if !(gmax > GRAD_FLOOR) {
        return Ok(tau);
    }
    let mut eta = params.max_first_step / gmax;
    let mut best = first.total;
    let mut best_tau = tau.clone();
    let mut best_grad = g.clone();
    let mut best_trace = vec![best];
    let mut vel = vec![0.0; 3 * n];
    for it in 1..=max_iter {
        for k in 0..3 * n {
            vel[k] = params.momentum * vel[k] - eta * g[k];
            tau[k] += vel[k];
        }
        let (t, ng) = inputs.eval(&tau, w, true);
        let r = report(level, it, t, w);
        history.push(r);
        let ng = ng.expect("gradient requested");
        if !r.total.is_finite() || ng.iter().any(|v| !v.is_finite()) {
            return Err((it, best_tau));
        }
        g = ng;
        if r.total < best {
            best = r.total;
            best_tau.copy_from_slice(&tau);
            best_grad.copy_from_slice(&g);
        } else if r.total > best + BACKTRACK_REL * best.abs() {
            tau.copy_from_slice(&best_tau);
            g.copy_from_slice(&best_grad);
            vel.fill(0.0);
            eta *= 0.5;
        }
        best_trace.push(best);
        if it >= params.patience {
            let before = best_trace[it - params.patience];
            if before - best <= params.tolerance * before.abs() {
                break;
            }
        }
    }
    Ok(best_tau)
}

/// Minimize `(1 − NCC) + λ·SAM + γ·smooth` over a dense field by momentum
/// gradient descent on a block-average pyramid.
///
/// Each level starts from the previous level's best field, upsampled ×2 in
/// position and value. The step size of a level is fixed by its first
/// gradient so that the first update moves no voxel by more than
/// `max_first_step`; steps that raise the loss are undone and the step
/// halved. Returns the best full-resolution field and every iterate's loss.
pub fn optimize_field(
    fixed: &Volume,
    moving: &Volume,
    sf: &EmbeddingVolume,
    sm: &EmbeddingVolume,
    mask: &BodyMask,
    params: &OptParams,
) -> Result<(DisplacementField, Vec<LossReport>)> {
    params.validate()?;
    let mut levels = vec![LossInputs::new(
        fixed,
        moving,
        sf,
        sm,
        mask,
        params.ncc_radius_fine,
    )?];
    while levels.len() < params.levels
        && levels
            .last()
            .unwrap()
            .dims
            .0
            .iter()
            .all(|&d| d >= MIN_PYRAMID_EXTENT)
    {
        levels.push(levels.last().unwrap().coarser(0));
    }
    let count = levels.len();
    for (l, lv) in levels.iter_mut().enumerate() {
        lv.radius = params.radius(l, count);
    }
    if count < params.levels {
        log::info!("pyramid limited to {count} levels by volume size");
    }

    let top = &levels[count - 1];
    let mut tau = if params.correlation_seed {
        let feat = correlation_feature(sf, sm, 2)?;
        let n0 = fixed.dims().len();
        let mut seed = vec![0.0; 3 * n0];
        for i in 0..n0 {
            let d = feat.argmax_displacement(i);
            for a in 0..3 {
                seed[a * n0 + i] = d[a] as f64;
            }
        }
        let mut dims = fixed.dims();
        for _ in 1..count {
            let (s, d) = pyramid::downsample_field(&seed, dims);
            seed = s;
            dims = d;
        }
        seed
    } else {
        vec![0.0; 3 * top.dims.len()]
    };

    let mut history = Vec::new();
    for l in (0..count).rev() {
        let max_iter = params.iterations(l, count);
        match descend(&levels[l], l, tau, params, max_iter, &mut history) {
            Ok(best) => tau = best,
            Err((iteration, best)) => {
                let mut t = best;
                for k in (1..=l).rev() {
                    t = pyramid::upsample_field(&t, levels[k].dims, levels[k - 1].dims);
                }
                let last = DisplacementField::from_f64(fixed.dims(), &t)
                    .with_geometry(fixed.spacing(), fixed.origin());
                return Err(Error::NonFiniteLoss {
                    level: l,
                    iteration,
                    last_field: Box::new(last),
                });
            }
        }
        if l > 0 {
            tau = pyramid::upsample_field(&tau, levels[l].dims, levels[l - 1].dims);
        }
    }
    let field = DisplacementField::from_f64(fixed.dims(), &tau)
        .with_geometry(fixed.spacing(), fixed.origin());
    Ok((field, history))
}

/// Write a loss history as CSV (iteration, level, ncc, sam, smooth, total).
pub fn write_loss_history(history: &[LossReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Largest relative difference between the analytic gradient of one loss
/// term and central finite differences (step 1e-3 voxel) at `samples`
/// randomly drawn (mask voxel, axis) coordinates.
///
/// For the interpolated terms, coordinates whose sample position lies within
/// two steps of a lattice plane (where trilinear interpolation has a kink) or
/// outside the volume are redrawn. Relative error uses the denominator
/// `max(|a|, |b|, 1e-8)`.
pub fn gradient_check(
    term: LossTerm,
    inputs: &LossInputs,
    tau: &DisplacementField,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_dims(inputs.dims.0, tau.dims().0)?;
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "gradient check needs ≥ 1 sample".into(),
        ));
    }
    let w = match term {
        LossTerm::Ncc => Weights {
            ncc: 1.0,
            sam: 0.0,
            smooth: 0.0,
        },
        LossTerm::Sam => Weights {
            ncc: 0.0,
            sam: 1.0,
            smooth: 0.0,
        },
        LossTerm::Smoothness => Weights {
            ncc: 0.0,
            sam: 0.0,
            smooth: 1.0,
        },
    };
    let dims = inputs.dims;
    let n = dims.len();
    let mut t = tau.to_f64();
    let analytic = inputs.eval(&t, w, true).1.expect("gradient requested");
    let voxels: Vec<usize> = (0..n).filter(|&i| inputs.mask[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut taken = 0;
    let mut attempts = 0;
    while taken < samples {
        attempts += 1;
        if attempts > 1000 * samples {
            return Err(Error::InvalidParameter(
                "too few gradient-check coordinates away from lattice planes".into(),
            ));
        }
        let u = voxels[rng.random_range(0..voxels.len())];
        let a = rng.random_range(0..3);
        if term != LossTerm::Smoothness {
            let p = dims.coords(u)[a] as f64 + t[a * n + u];
            let max = (dims.0[a] - 1) as f64;
            let frac = p - p.floor();
            let margin = 2.0 * FD_STEP;
            if p < margin || p > max - margin || frac < margin || frac > 1.0 - margin {
                continue;
            }
        }
        let k = a * n + u;
        let orig = t[k];
        t[k] = orig + FD_STEP;
        let plus = inputs.eval(&t, w, false).0.total(w);
        t[k] = orig - FD_STEP;
        let minus = inputs.eval(&t, w, false).0.total(w);
        t[k] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let an = analytic[k];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        taken += 1;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_schedule_interpolates() {
        let p = OptParams::default();
        assert_eq!(p.radius(2, 3), 2);
        assert_eq!(p.radius(1, 3), 3);
        assert_eq!(p.radius(0, 3), 4);
        assert_eq!(p.radius(0, 1), 4);
    }

    #[test]
    fn iteration_caps_repeat_last() {
        let p = OptParams {
            max_iterations: vec![10, 5],
            ..OptParams::default()
        };
        assert_eq!(p.iterations(2, 3), 10);
        assert_eq!(p.iterations(1, 3), 5);
        assert_eq!(p.iterations(0, 3), 5);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = OptParams {
            momentum: 1.0,
            ..OptParams::default()
        };
        assert!(p.validate().is_err());
    }
}
