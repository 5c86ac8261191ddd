//! Loss terms of the deformable stage and their analytic gradients.
//!
//! All three terms are means over the body mask Ω:
//!
//! * local NCC similarity `mean CC²`, minimized as `1 − mean CC²`;
//! * embedding loss `1 − mean ⟨S_f(u), Ŝ_m(u + τ(u))⟩` with Ŝ the renormalized
//!   trilinear interpolation of the moving embedding;
//! * smoothness `mean Σ_axis ‖Δτ‖²` with forward differences (backward at the
//!   upper border).

use rayon::prelude::*;

use crate::embedding::EmbeddingVolume;
use crate::error::{check_dims, Error, Result};
use crate::field::DisplacementField;
use crate::filter::{box_sum, window_count};
use crate::interp;
use crate::mask::BodyMask;
use crate::par::ordered_sum;
use crate::volume::{Dims, Volume};

/// Added to `Σ(f−f̄)²·Σ(m−m̄)²` before division.
pub const NCC_EPS: f64 = 1e-5;

const MIN_NORM: f64 = 1e-12;

/// Per-voxel windowed statistics of a fixed/warped pair.
struct NccStats {
    cc2: Vec<f64>,
    /// ∂CC²/∂cross and the J-variance coefficient, zero outside the mask.
    a: Vec<f64>,
    b: Vec<f64>,
    mean_i: Vec<f64>,
    mean_j: Vec<f64>,
}

fn ncc_stats(i: &[f64], j: &[f64], dims: Dims, mask: &[bool], r: usize, grad: bool) -> NccStats {
    let ii: Vec<f64> = i.iter().map(|v| v * v).collect();
    let jj: Vec<f64> = j.iter().map(|v| v * v).collect();
    let ij: Vec<f64> = i.iter().zip(j).map(|(a, b)| a * b).collect();
    let si = box_sum(i, dims, r);
    let sj = box_sum(j, dims, r);
    let sii = box_sum(&ii, dims, r);
    let sjj = box_sum(&jj, dims, r);
    let sij = box_sum(&ij, dims, r);
    let per: Vec<[f64; 5]> = (0..dims.len())
        .into_par_iter()
        .map(|u| {
            if !mask[u] {
                return [0.0; 5];
            }
            let n = window_count(dims, u, r) as f64;
            let cross = sij[u] - si[u] * sj[u] / n;
            let ivar = (sii[u] - si[u] * si[u] / n).max(0.0);
            let jvar = (sjj[u] - sj[u] * sj[u] / n).max(0.0);
            let d = ivar * jvar + NCC_EPS;
            let cc2 = cross * cross / d;
            if !grad {
                return [cc2, 0.0, 0.0, 0.0, 0.0];
            }
            [
                cc2,
                2.0 * cross / d,
                2.0 * cross * cross * ivar / (d * d),
                si[u] / n,
                sj[u] / n,
            ]
        })
        .collect();
    let col = |k: usize| per.iter().map(|p| p[k]).collect::<Vec<f64>>();
    NccStats {
        cc2: col(0),
        a: if grad { col(1) } else { Vec::new() },
        b: if grad { col(2) } else { Vec::new() },
        mean_i: if grad { col(3) } else { Vec::new() },
        mean_j: if grad { col(4) } else { Vec::new() },
    }
}

/// Mean CC² over the mask and optionally `∂(mean CC²)/∂J(v)` at every voxel.
pub(crate) fn ncc_similarity(
    i: &[f64],
    j: &[f64],
    dims: Dims,
    mask: &[bool],
    count: usize,
    r: usize,
    grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let st = ncc_stats(i, j, dims, mask, r, grad);
    let sim = ordered_sum(dims.len(), |u| st.cc2[u]) / count as f64;
    if !grad {
        return (sim, None);
    }
    let ai: Vec<f64> = st.a.iter().zip(&st.mean_i).map(|(a, m)| a * m).collect();
    let bj: Vec<f64> = st.b.iter().zip(&st.mean_j).map(|(b, m)| b * m).collect();
    let box_a = box_sum(&st.a, dims, r);
    let box_ai = box_sum(&ai, dims, r);
    let box_b = box_sum(&st.b, dims, r);
    let box_bj = box_sum(&bj, dims, r);
    let inv = 1.0 / count as f64;
    let g = (0..dims.len())
        .into_par_iter()
        .map(|v| inv * (i[v] * box_a[v] - box_ai[v] - j[v] * box_b[v] + box_bj[v]))
        .collect();
    (sim, Some(g))
}

fn require_mask(mask: &BodyMask, dims: Dims) -> Result<()> {
    check_dims(dims.0, mask.dims().0)?;
    if mask.voxel_count() == 0 {
        return Err(Error::InvalidParameter("body mask is empty".into()));
    }
    Ok(())
}

/// Mean over the mask of the squared windowed correlation between `f` and `m`,
/// windows of (2·radius+1)³ clipped to the volume. 1 means perfect local
/// correlation; the optimizer minimizes `1 − value`.
pub fn local_ncc_loss(f: &Volume, m: &Volume, mask: &BodyMask, radius: usize) -> Result<f64> {
    check_dims(f.dims().0, m.dims().0)?;
    require_mask(mask, f.dims())?;
    if radius == 0 {
        return Err(Error::InvalidParameter(
            "NCC window radius must be ≥ 1".into(),
        ));
    }
    let i: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
    let j: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let (sim, _) = ncc_similarity(
        &i,
        &j,
        f.dims(),
        mask.data(),
        mask.voxel_count(),
        radius,
        false,
    );
    Ok(sim)
}

/// `1 − mean_Ω ⟨S_f(u), S_m(u)⟩` for two normalized embeddings on the same grid.
pub fn sam_loss(sf: &EmbeddingVolume, sm_warped: &EmbeddingVolume, mask: &BodyMask) -> Result<f64> {
    check_dims(sf.dims().0, sm_warped.dims().0)?;
    require_mask(mask, sf.dims())?;
    sf.require_normalized()?;
    sm_warped.require_normalized()?;
    if sf.channels() != sm_warped.channels() {
        return Err(Error::InvalidParameter(format!(
            "channel mismatch: {} vs {}",
            sf.channels(),
            sm_warped.channels()
        )));
    }
    let n = sf.dims().len();
    let c = sf.channels();
    let (a, b) = (sf.data(), sm_warped.data());
    let total = ordered_sum(n, |u| {
        if !mask.contains(u) {
            return 0.0;
        }
        (0..c)
            .map(|ch| a[ch * n + u] as f64 * b[ch * n + u] as f64)
            .sum()
    });
    Ok(1.0 - total / mask.voxel_count() as f64)
}

/// Mean over the mask of `Σ_axis Σ_channel (Δτ)²`, forward differences with a
/// backward difference on the last slice of each axis.
pub fn smoothness_loss(tau: &DisplacementField, mask: &BodyMask) -> Result<f64> {
    require_mask(mask, tau.dims())?;
    let t = tau.to_f64();
    Ok(smoothness(
        &t,
        tau.dims(),
        mask.data(),
        mask.voxel_count(),
        None,
    ))
}

/// Neighbor pair `(p, q)` whose difference τ(p) − τ(q) is the derivative at `u`.
#[inline]
fn diff_pair(dims: Dims, u: usize, axis: usize) -> Option<(usize, usize)> {
    let n = dims.0[axis];
    if n < 2 {
        return None;
    }
    let c = dims.coords(u)[axis];
    let s = dims.stride(axis);
    Some(if c + 1 < n { (u + s, u) } else { (u, u - s) })
}

/// Smoothness value; when `grad = (g, w)` is given, adds `w·∂/∂τ` into `g`.
pub(crate) fn smoothness(
    tau: &[f64],
    dims: Dims,
    mask: &[bool],
    count: usize,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n = dims.len();
    let total = ordered_sum(n, |u| {
        if !mask[u] {
            return 0.0;
        }
        let mut acc = 0.0;
        for axis in 0..3 {
            if let Some((p, q)) = diff_pair(dims, u, axis) {
                for c in 0..3 {
                    let d = tau[c * n + p] - tau[c * n + q];
                    acc += d * d;
                }
            }
        }
        acc
    });
    if let Some((g, weight)) = grad {
        let k = 2.0 * weight / count as f64;
        for u in (0..n).filter(|&u| mask[u]) {
            for axis in 0..3 {
                if let Some((p, q)) = diff_pair(dims, u, axis) {
                    for c in 0..3 {
                        let d = k * (tau[c * n + p] - tau[c * n + q]);
                        g[c * n + p] += d;
                        g[c * n + q] -= d;
                    }
                }
            }
        }
    }
    total / count as f64
}

/// Embedding term `1 − mean cos` at displacement `tau`; `sf` and `sm` are
/// voxel-major (interleaved). When `grad = (g, w)` is given, adds `w·∂/∂τ` into `g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sam_term(
    sf: &[f32],
    sm: &[f32],
    channels: usize,
    dims: Dims,
    tau: &[f64],
    mask: &[bool],
    count: usize,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n = dims.len();
    let c = channels;
    let want = grad.is_some();
    let per: Vec<(f64, [f64; 3])> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; c], vec![[0.0f64; 3]; c]),
            |(w, dw), u| {
                if !mask[u] {
                    return (0.0, [0.0; 3]);
                }
                let p = target(dims, tau, u);
                let st = interp::grad_stencil(dims, p);
                let f = &sf[u * c..(u + 1) * c];
                w.fill(0.0);
                dw.fill([0.0; 3]);
                for k in 0..8 {
                    let src = &sm[st.idx[k] * c..(st.idx[k] + 1) * c];
                    for ch in 0..c {
                        let v = src[ch] as f64;
                        w[ch] += st.w[k] * v;
                        if want {
                            dw[ch][0] += st.dw[0][k] * v;
                            dw[ch][1] += st.dw[1][k] * v;
                            dw[ch][2] += st.dw[2][k] * v;
                        }
                    }
                }
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < MIN_NORM {
                    return (0.0, [0.0; 3]);
                }
                let fw: f64 = (0..c).map(|ch| f[ch] as f64 * w[ch]).sum();
                let cos = fw / norm;
                let mut g = [0.0; 3];
                if want {
                    let n3 = norm * norm * norm;
                    for ch in 0..c {
                        let dc = f[ch] as f64 / norm - fw * w[ch] / n3;
                        for a in 0..3 {
                            g[a] += dc * dw[ch][a];
                        }
                    }
                }
                (cos, g)
            },
        )
        .collect();
    let mean = ordered_sum(n, |u| per[u].0) / count as f64;
    if let Some((gr, weight)) = grad {
        let k = weight / count as f64;
        for (u, (_, g)) in per.iter().enumerate() {
            for a in 0..3 {
                gr[a * n + u] -= k * g[a];
            }
        }
    }
    1.0 - mean
}

#[inline]
pub(crate) fn target(dims: Dims, tau: &[f64], u: usize) -> [f64; 3] {
    let n = dims.len();
    let c = dims.coords(u);
    [
        c[0] as f64 + tau[u],
        c[1] as f64 + tau[n + u],
        c[2] as f64 + tau[2 * n + u],
    ]
}

/// Moving intensities at `u + τ(u)` and their spatial gradients (channel-major).
pub(crate) fn warp_with_grad(moving: &[f32], dims: Dims, tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = dims.len();
    let per: Vec<(f64, [f64; 3])> = (0..n)
        .into_par_iter()
        .map(|u| interp::sample_with_grad(moving, dims, target(dims, tau, u)))
        .collect();
    let mut grad = vec![0.0; 3 * n];
    for (u, (_, g)) in per.iter().enumerate() {
        for a in 0..3 {
            grad[a * n + u] = g[a];
        }
    }
    (per.into_iter().map(|p| p.0).collect(), grad)
}
