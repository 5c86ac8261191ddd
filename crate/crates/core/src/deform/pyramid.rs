//! 2× block-average pyramids and field transfer between levels.
//!
//! Coarse voxel `i` covers fine voxels `2i` and `2i+1`, so its center sits at
//! fine coordinate `2i + 0.5`.

use rayon::prelude::*;

use crate::interp;
use crate::volume::Dims;

pub(crate) fn half_dims(d: Dims) -> Dims {
    Dims(d.0.map(|n| n.div_ceil(2)))
}

fn block(d: Dims, coarse: Dims, i: usize) -> impl Iterator<Item = usize> {
    let [z, y, x] = coarse.coords(i);
    let zs = (2 * z)..(2 * z + 2).min(d.0[0]);
    let ys = (2 * y)..(2 * y + 2).min(d.0[1]);
    let xs = (2 * x)..(2 * x + 2).min(d.0[2]);
    zs.flat_map(move |zz| {
        let xs = xs.clone();
        ys.clone()
            .flat_map(move |yy| xs.clone().map(move |xx| d.index(zz, yy, xx)))
    })
}

/// Block average of a scalar volume.
pub(crate) fn downsample_scalar(data: &[f32], d: Dims) -> (Vec<f32>, Dims) {
    let coarse = half_dims(d);
    let out = (0..coarse.len())
        .into_par_iter()
        .map(|i| {
            let (mut s, mut k) = (0.0f64, 0usize);
            for j in block(d, coarse, i) {
                s += data[j] as f64;
                k += 1;
            }
            (s / k as f64) as f32
        })
        .collect();
    (out, coarse)
}

/// Block average of an interleaved vector volume, renormalized per voxel.
pub(crate) fn downsample_vectors(data: &[f32], c: usize, d: Dims) -> (Vec<f32>, Dims) {
    let coarse = half_dims(d);
    let out: Vec<Vec<f32>> = (0..coarse.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0f64; c];
            for j in block(d, coarse, i) {
                for ch in 0..c {
                    acc[ch] += data[j * c + ch] as f64;
                }
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                acc.iter().map(|v| (v / norm) as f32).collect()
            } else {
                let mut e = vec![0.0f32; c];
                e[0] = 1.0;
                e
            }
        })
        .collect();
    (out.concat(), coarse)
}

/// Displacement (channel-major) on `fine` from one on `coarse`: sampled at
/// `(x − 0.5)/2` and doubled.
pub(crate) fn upsample_field(tau: &[f64], coarse: Dims, fine: Dims) -> Vec<f64> {
    let nc = coarse.len();
    let nf = fine.len();
    let vals: Vec<[f64; 3]> = (0..nf)
        .into_par_iter()
        .map(|i| {
            let p = fine.coords(i).map(|c| (c as f64 - 0.5) / 2.0);
            let s = interp::stencil(coarse, p);
            let mut out = [0.0; 3];
            for (a, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += s.w[k] * tau[a * nc + s.idx[k]];
                }
                *o = 2.0 * acc;
            }
            out
        })
        .collect();
    let mut out = vec![0.0; 3 * nf];
    for (i, v) in vals.iter().enumerate() {
        for a in 0..3 {
            out[a * nf + i] = v[a];
        }
    }
    out
}

/// Block average of a channel-major field, values halved.
pub(crate) fn downsample_field(tau: &[f64], fine: Dims) -> (Vec<f64>, Dims) {
    let coarse = half_dims(fine);
    let (nf, nc) = (fine.len(), coarse.len());
    let mut out = vec![0.0; 3 * nc];
    for a in 0..3 {
        for i in 0..nc {
            let (mut s, mut k) = (0.0, 0usize);
            for j in block(fine, coarse, i) {
                s += tau[a * nf + j];
                k += 1;
            }
            out[a * nc + i] = 0.5 * s / k as f64;
        }
    }
    (out, coarse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_dims_round_up() {
        assert_eq!(half_dims(Dims::new(5, 4, 1)).0, [3, 2, 1]);
    }

    #[test]
    fn block_average_of_ramp() {
        let d = Dims::new(1, 1, 4);
        let (v, c) = downsample_scalar(&[0.0, 1.0, 2.0, 3.0], d);
        assert_eq!(c.0, [1, 1, 2]);
        assert_eq!(v, vec![0.5, 2.5]);
    }

    #[test]
    fn constant_field_doubles_on_upsampling() {
        let coarse = Dims::new(3, 3, 3);
        let fine = Dims::new(6, 6, 6);
        let mut tau = vec![0.0; 3 * coarse.len()];
        tau[..coarse.len()].fill(1.5);
        let up = upsample_field(&tau, coarse, fine);
        assert!(up[..fine.len()].iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(up[fine.len()..].iter().all(|&v| v == 0.0));
        let (down, c) = downsample_field(&up, fine);
        assert_eq!(c, coarse);
        assert!(down[..coarse.len()]
            .iter()
            .all(|&v| (v - 1.5).abs() < 1e-12));
    }
}
