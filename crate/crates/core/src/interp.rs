//! Border-clamped trilinear interpolation shared by every warping path.

use crate::volume::Dims;

/// Corner indices and weights of one trilinear sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// Stencil plus the derivative of each weight with respect to the
/// sample position along (z, y, x). Derivatives vanish along axes where the
/// position was clamped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GradStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

#[inline]
fn axis(n: usize, p: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&p);
    let pc = if p.is_nan() { 0.0 } else { p.clamp(0.0, max) };
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, inside)
}

#[inline]
pub(crate) fn stencil(dims: Dims, pos: [f64; 3]) -> Stencil {
    let (z0, z1, tz, _) = axis(dims.0[0], pos[0]);
    let (y0, y1, ty, _) = axis(dims.0[1], pos[1]);
    let (x0, x1, tx, _) = axis(dims.0[2], pos[2]);
    let zs = [(z0, 1.0 - tz), (z1, tz)];
    let ys = [(y0, 1.0 - ty), (y1, ty)];
    let xs = [(x0, 1.0 - tx), (x1, tx)];
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    let mut k = 0;
    for &(z, wz) in &zs {
        for &(y, wy) in &ys {
            for &(x, wx) in &xs {
                idx[k] = dims.index(z, y, x);
                w[k] = wz * wy * wx;
                k += 1;
            }
        }
    }
    Stencil { idx, w }
}

#[inline]
pub(crate) fn grad_stencil(dims: Dims, pos: [f64; 3]) -> GradStencil {
    let (z0, z1, tz, iz) = axis(dims.0[0], pos[0]);
    let (y0, y1, ty, iy) = axis(dims.0[1], pos[1]);
    let (x0, x1, tx, ix) = axis(dims.0[2], pos[2]);
    let gz = if iz { 1.0 } else { 0.0 };
    let gy = if iy { 1.0 } else { 0.0 };
    let gx = if ix { 1.0 } else { 0.0 };
    let zs = [(z0, 1.0 - tz, -gz), (z1, tz, gz)];
    let ys = [(y0, 1.0 - ty, -gy), (y1, ty, gy)];
    let xs = [(x0, 1.0 - tx, -gx), (x1, tx, gx)];
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    let mut dw = [[0.0f64; 8]; 3];
    let mut k = 0;
    for &(z, wz, dz) in &zs {
        for &(y, wy, dy) in &ys {
            for &(x, wx, dx) in &xs {
                idx[k] = dims.index(z, y, x);
                w[k] = wz * wy * wx;
                dw[0][k] = dz * wy * wx;
                dw[1][k] = wz * dy * wx;
                dw[2][k] = wz * wy * dx;
                k += 1;
            }
        }
    }
    GradStencil { idx, w, dw }
}

#[inline]
pub(crate) fn sample(data: &[f32], dims: Dims, pos: [f64; 3]) -> f64 {
    let s = stencil(dims, pos);
    let mut acc = 0.0;
    for k in 0..8 {
        acc += s.w[k] * data[s.idx[k]] as f64;
    }
    acc
}

/// Sample value and its spatial gradient along (z, y, x).
#[inline]
pub(crate) fn sample_with_grad(data: &[f32], dims: Dims, pos: [f64; 3]) -> (f64, [f64; 3]) {
    let s = grad_stencil(dims, pos);
    let mut v = 0.0;
    let mut g = [0.0; 3];
    for k in 0..8 {
        let d = data[s.idx[k]] as f64;
        v += s.w[k] * d;
        g[0] += s.dw[0][k] * d;
        g[1] += s.dw[1][k] * d;
        g[2] += s.dw[2][k] * d;
    }
    (v, g)
}

/// Nearest-neighbour index with border clamp; halves round away from zero.
#[inline]
pub(crate) fn nearest(dims: Dims, pos: [f64; 3]) -> usize {
    let c: [usize; 3] = std::array::from_fn(|a| {
        let max = (dims.0[a] - 1) as f64;
        let p = if pos[a].is_nan() { 0.0 } else { pos[a] };
        p.round().clamp(0.0, max) as usize
    });
    dims.index(c[0], c[1], c[2])
}
