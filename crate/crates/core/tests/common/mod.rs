//! Shared fixtures and direct-summation oracles for the integration tests.
#![allow(dead_code)]

use embreg::synthetic::{random_affine, render_pair, Phantom, SmoothField, SyntheticPair};
use embreg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dims(rng: &mut impl Rng, lo: usize, hi: usize) -> Dims {
    Dims::new(
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    )
}

/// i.i.d. uniform channels, unit-normalized.
pub fn random_embedding(rng: &mut impl Rng, dims: Dims, channels: usize) -> EmbeddingVolume {
    let data = (0..channels * dims.len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    normalize_embedding(&EmbeddingVolume::new(channels, dims, data).unwrap())
}

/// Random channels box-blurred with the given radius, then normalized.
/// Neighbouring vectors are strongly correlated, so similarity maps are broad.
pub fn smooth_embedding(
    rng: &mut impl Rng,
    dims: Dims,
    channels: usize,
    radius: usize,
) -> EmbeddingVolume {
    let n = dims.len();
    let mut data = Vec::with_capacity(channels * n);
    for _ in 0..channels {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        data.extend(box_blur(&raw, dims, radius).into_iter().map(|v| v as f32));
    }
    normalize_embedding(&EmbeddingVolume::new(channels, dims, data).unwrap())
}

fn box_blur(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = dims.coords(i);
            let lo = c[axis].saturating_sub(r);
            let hi = (c[axis] + r).min(dims.0[axis] - 1);
            let mut s = 0.0;
            for k in lo..=hi {
                let mut q = c;
                q[axis] = k;
                s += cur[dims.index(q[0], q[1], q[2])];
            }
            *out = s / (hi - lo + 1) as f64;
        }
        cur = next;
    }
    cur
}

/// Smooth random image with values roughly in [-1, 1].
pub fn smooth_volume(rng: &mut impl Rng, dims: Dims) -> Volume {
    let raw: Vec<f64> = (0..dims.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let b = box_blur(&raw, dims, 1);
    let max = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    Volume::new(
        dims,
        [1.0; 3],
        [0.0; 3],
        b.iter().map(|v| (v / max) as f32).collect(),
    )
    .unwrap()
}

pub fn random_mask(rng: &mut impl Rng, dims: Dims, p: f64) -> BodyMask {
    let mut data: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(p)).collect();
    data[rng.random_range(0..dims.len())] = true;
    BodyMask::from_data(dims, data).unwrap()
}

pub fn random_field(rng: &mut impl Rng, dims: Dims, amplitude: f64) -> DisplacementField {
    let data = (0..3 * dims.len())
        .map(|_| rng.random_range(-amplitude..amplitude) as f32)
        .collect();
    DisplacementField::new(dims, data).unwrap()
}

pub fn dot_at(a: &EmbeddingVolume, i: usize, b: &EmbeddingVolume, j: usize) -> f64 {
    (0..a.channels())
        .map(|c| a.channel(c)[i] as f64 * b.channel(c)[j] as f64)
        .sum()
}

/// Argmax over all voxels by direct enumeration; first maximum in z-major order wins.
pub fn brute_argmax(query: &[f32], target: &EmbeddingVolume) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..target.dims().len() {
        let s: f64 = (0..target.channels())
            .map(|c| query[c] as f64 * target.channel(c)[j] as f64)
            .sum();
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// Mean over the mask of the squared windowed correlation, computed by
/// explicit per-window loops with two-pass moments.
pub fn ncc_oracle(f: &Volume, m: &Volume, mask: &BodyMask, r: usize) -> f64 {
    let dims = f.dims();
    let [d, h, w] = dims.0;
    let mut total = 0.0;
    for u in mask.indices() {
        let [z, y, x] = dims.coords(u);
        let mut idx = Vec::new();
        for zz in z.saturating_sub(r)..=(z + r).min(d - 1) {
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    idx.push(dims.index(zz, yy, xx));
                }
            }
        }
        let k = idx.len() as f64;
        let fm = idx.iter().map(|&i| f.data()[i] as f64).sum::<f64>() / k;
        let mm = idx.iter().map(|&i| m.data()[i] as f64).sum::<f64>() / k;
        let (mut c, mut vf, mut vm) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let a = f.data()[i] as f64 - fm;
            let b = m.data()[i] as f64 - mm;
            c += a * b;
            vf += a * a;
            vm += b * b;
        }
        total += c * c / (vf * vm + 1e-5);
    }
    total / mask.voxel_count() as f64
}

pub fn sam_oracle(a: &EmbeddingVolume, b: &EmbeddingVolume, mask: &BodyMask) -> f64 {
    let s: f64 = mask.indices().iter().map(|&i| dot_at(a, i, b, i)).sum();
    1.0 - s / mask.voxel_count() as f64
}

/// Forward differences, backward on the last slice of each axis.
pub fn smoothness_oracle(tau: &DisplacementField, mask: &BodyMask) -> f64 {
    let dims = tau.dims();
    let mut total = 0.0;
    for u in mask.indices() {
        let c = dims.coords(u);
        for axis in 0..3 {
            let len = dims.0[axis];
            if len < 2 {
                continue;
            }
            let mut p = c;
            let mut q = c;
            if c[axis] + 1 < len {
                p[axis] += 1;
            } else {
                q[axis] -= 1;
            }
            let a = tau.at(dims.index(p[0], p[1], p[2]));
            let b = tau.at(dims.index(q[0], q[1], q[2]));
            total += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        }
    }
    total / mask.voxel_count() as f64
}

/// Symmetric ASD by comparing every surface voxel with every other surface voxel.
pub fn asd_oracle(a: &LabelVolume, b: &LabelVolume, label: u16, spacing: [f64; 3]) -> Option<f64> {
    let dims = a.dims();
    let surf = |l: &LabelVolume| -> Vec<[f64; 3]> {
        let d = l.data();
        (0..dims.len())
            .filter(|&i| d[i] == label)
            .filter(|&i| {
                let c = dims.coords(i);
                (0..3).any(|ax| {
                    [-1isize, 1].iter().any(|&s| {
                        let k = c[ax] as isize + s;
                        if k < 0 || k >= dims.0[ax] as isize {
                            return true;
                        }
                        let mut q = c;
                        q[ax] = k as usize;
                        d[dims.index(q[0], q[1], q[2])] != label
                    })
                })
            })
            .map(|i| {
                let c = dims.coords(i);
                [0, 1, 2].map(|ax| c[ax] as f64 * spacing[ax])
            })
            .collect()
    };
    let (sa, sb) = (surf(a), surf(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let s: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>()
        + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    Some(s / (sa.len() + sb.len()) as f64)
}

/// Per-voxel Jacobian determinant by central differences (one-sided at borders).
pub fn jacobian_oracle(tau: &DisplacementField) -> Vec<f64> {
    let dims = tau.dims();
    (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            let mut j = [[0.0; 3]; 3];
            for b in 0..3 {
                if dims.0[b] < 2 {
                    continue;
                }
                let mut p = c;
                let mut q = c;
                if c[b] + 1 < dims.0[b] {
                    p[b] += 1;
                }
                if c[b] > 0 {
                    q[b] -= 1;
                }
                let h = (p[b] - q[b]) as f64;
                let tp = tau.at(dims.index(p[0], p[1], p[2]));
                let tq = tau.at(dims.index(q[0], q[1], q[2]));
                for a in 0..3 {
                    j[a][b] = (tp[a] - tq[a]) / h;
                }
            }
            for (a, row) in j.iter_mut().enumerate() {
                row[a] += 1.0;
            }
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        })
        .collect()
}

/// Cascade benchmark pair: phantom with 5 organs, moving = phantom seen
/// through a random affine composed with a smooth field of maximum norm 6.
pub fn cascade_pair(n: usize, seed: u64) -> SyntheticPair {
    let dims = Dims::new(n, n, n);
    let ph = Phantom::generate(dims, 5, seed);
    let mut r = rng(seed);
    let a = random_affine(&mut r, dims.center(), 10.0, (0.92, 1.08), 8.0);
    let phi = SmoothField::random(&mut r, dims, 6, n as f64 / 6.0, 6.0);
    render_pair(&ph, &a, Some(&phi))
}

/// Write a pair as MetaImage files and return a config pointing at them.
pub fn write_pair(pair: &SyntheticPair, dir: &std::path::Path, out: &str) -> PipelineConfig {
    std::fs::create_dir_all(dir).unwrap();
    io::save_volume(&pair.fixed, &dir.join("fixed.mhd")).unwrap();
    io::save_volume(&pair.moving, &dir.join("moving.mhd")).unwrap();
    io::save_labels(&pair.fixed_labels, &dir.join("fixed_labels.mhd")).unwrap();
    io::save_labels(&pair.moving_labels, &dir.join("moving_labels.mhd")).unwrap();
    let mut cfg = PipelineConfig::new(dir.join("fixed.mhd"), dir.join("moving.mhd"), dir.join(out));
    cfg.fixed_labels = Some(dir.join("fixed_labels.mhd"));
    cfg.moving_labels = Some(dir.join("moving_labels.mhd"));
    cfg
}
