//! Analytic phantoms and known transforms for benchmarks and tests.
//!
//! The phantom is a textured ellipsoidal "body" containing ellipsoidal
//! labelled "organs", defined as a continuous function of position so a
//! deformed copy can be rendered without interpolation blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affine::AffineTransform;
use crate::field::DisplacementField;
use crate::labels::LabelVolume;
use crate::volume::{Dims, Volume};

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const EDGE_WIDTH: f64 = 0.75;
const ORGAN_HU: [f64; 8] = [220.0, -380.0, 130.0, 330.0, -150.0, 270.0, -260.0, 180.0];

#[derive(Debug, Clone)]
struct Bump {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Smooth inside indicator with an edge about `EDGE_WIDTH` voxels wide.
    fn soft(&self, p: [f64; 3]) -> f64 {
        let r = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        let d = (1.0 - self.rho(p)) * r;
        0.5 * (1.0 + (d / EDGE_WIDTH).tanh())
    }
}

/// Analytic CT-like phantom in Hounsfield units.
#[derive(Debug, Clone)]
pub struct Phantom {
    dims: Dims,
    body: Ellipsoid,
    texture: Vec<Bump>,
    organs: Vec<(u16, Ellipsoid, f64)>,
}

impl Phantom {
    /// Random phantom filling the central part of `dims` with `organs` labels (≤ 8).
    pub fn generate(dims: Dims, organs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = dims.center();
        let size = dims.0.map(|n| n as f64);
        let body = Ellipsoid {
            center: c,
            radii: std::array::from_fn(|a| size[a] * rng.random_range(0.30..0.34)),
        };
        let scale = size.iter().copied().fold(f64::INFINITY, f64::min) / 64.0;
        let volume_ratio = size.iter().product::<f64>() / 64f64.powi(3);
        let n_bumps = (300.0 * volume_ratio).round() as usize;
        let texture = (0..n_bumps)
            .map(|_| {
                let center = random_in_ellipsoid(&mut rng, &body, 1.05);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Bump {
                    center,
                    sigma: rng.random_range(1.5..3.5) * scale.max(1.0).sqrt(),
                    amplitude: sign * rng.random_range(90.0..220.0),
                }
            })
            .collect();
        let mut placed: Vec<(u16, Ellipsoid, f64)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < organs.min(ORGAN_HU.len()) && attempts < 10_000 {
            attempts += 1;
            // Shrink candidate organs when the body gets crowded.
            let shrink = 0.95f64.powi(attempts / 500);
            let radii: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(5.0..8.5) * scale * shrink);
            let inner = Ellipsoid {
                center: body.center,
                radii: std::array::from_fn(|a| body.radii[a] - radii[a] - 2.0 * scale),
            };
            if inner.radii.iter().any(|&r| r <= 0.0) {
                break;
            }
            let center = random_in_ellipsoid(&mut rng, &inner, 1.0);
            let clear = placed.iter().all(|(_, o, _)| {
                let d = (0..3)
                    .map(|a| (o.center[a] - center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let ro = o.radii.iter().copied().fold(0.0, f64::max);
                let rn = radii.iter().copied().fold(0.0, f64::max);
                d > ro + rn + 1.5 * scale
            });
            if clear {
                let label = placed.len() as u16 + 1;
                placed.push((label, Ellipsoid { center, radii }, ORGAN_HU[placed.len()]));
            }
        }
        Phantom {
            dims,
            body,
            texture,
            organs: placed,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn organ_count(&self) -> usize {
        self.organs.len()
    }

    pub fn intensity_hu(&self, p: [f64; 3]) -> f64 {
        let body = self.body.soft(p);
        if body < 1e-9 {
            return AIR_HU;
        }
        let mut tissue = TISSUE_HU;
        for (_, o, hu) in &self.organs {
            let w = o.soft(p);
            if w > 0.0 {
                tissue += w * (hu - TISSUE_HU);
            }
        }
        for b in &self.texture {
            let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            let s2 = b.sigma * b.sigma;
            if d2 < 16.0 * s2 {
                tissue += b.amplitude * (-d2 / (2.0 * s2)).exp();
            }
        }
        AIR_HU + body * (tissue - AIR_HU)
    }

    pub fn label(&self, p: [f64; 3]) -> u16 {
        self.organs
            .iter()
            .find(|(_, o, _)| o.rho(p) <= 1.0)
            .map_or(0, |(l, _, _)| *l)
    }

    /// Render intensities and labels with voxel `u` showing phantom point `map(u)`.
    pub fn render(&self, map: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> (Volume, LabelVolume) {
        let dims = self.dims;
        let vol = Volume::from_fn(dims, |z, y, x| {
            self.intensity_hu(map([z as f64, y as f64, x as f64])) as f32
        })
        .with_geometry([2.0; 3], [0.0; 3])
        .expect("valid spacing");
        let labels = (0..dims.len())
            .map(|i| self.label(map(dims.coords(i).map(|c| c as f64))))
            .collect();
        let labels = LabelVolume::new(dims, labels)
            .expect("dims match")
            .with_geometry([2.0; 3], [0.0; 3]);
        (vol, labels)
    }
}

fn random_in_ellipsoid(rng: &mut ChaCha8Rng, e: &Ellipsoid, extent: f64) -> [f64; 3] {
    loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return std::array::from_fn(|a| e.center[a] + extent * u[a] * e.radii[a]);
        }
    }
}

/// Affine about `center`: `p ↦ center + s·R·(p − center) + t` with a random
/// rotation of at most `max_deg` about a random axis, isotropic scale in
/// `scale_range` and a translation of norm at most `max_translation`.
pub fn random_affine(
    rng: &mut impl Rng,
    center: [f64; 3],
    max_deg: f64,
    scale_range: (f64, f64),
    max_translation: f64,
) -> AffineTransform {
    let axis = loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break a.map(|v| v / n);
        }
    };
    let angle = rng.random_range(-max_deg..=max_deg).to_radians();
    let s = rng.random_range(scale_range.0..=scale_range.1);
    let t = loop {
        let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if d.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break d.map(|v| v * max_translation);
        }
    };
    let (sa, ca) = angle.sin_cos();
    let [x, y, z] = axis;
    let r = [
        [
            ca + x * x * (1.0 - ca),
            x * y * (1.0 - ca) - z * sa,
            x * z * (1.0 - ca) + y * sa,
        ],
        [
            y * x * (1.0 - ca) + z * sa,
            ca + y * y * (1.0 - ca),
            y * z * (1.0 - ca) - x * sa,
        ],
        [
            z * x * (1.0 - ca) - y * sa,
            z * y * (1.0 - ca) + x * sa,
            ca + z * z * (1.0 - ca),
        ],
    ];
    let linear: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| s * r[i][j]));
    let translation: [f64; 3] = std::array::from_fn(|i| {
        center[i] + t[i] - (0..3).map(|j| linear[i][j] * center[j]).sum::<f64>()
    });
    AffineTransform::from_parts(linear, translation)
}

/// Smooth vector field built from Gaussian bumps, scaled to a given maximum norm.
#[derive(Debug, Clone)]
pub struct SmoothField {
    bumps: Vec<([f64; 3], [f64; 3])>,
    sigma: f64,
    gain: f64,
}

impl SmoothField {
    /// `count` bumps of width `sigma` centred inside the middle of `dims`; the
    /// field's maximum norm over the grid is `max_norm`.
    pub fn random(rng: &mut impl Rng, dims: Dims, count: usize, sigma: f64, max_norm: f64) -> Self {
        let c = dims.center();
        let bumps = (0..count)
            .map(|_| {
                let center =
                    std::array::from_fn(|a| c[a] + rng.random_range(-0.3..0.3) * dims.0[a] as f64);
                let v = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                (center, v)
            })
            .collect();
        let mut f = SmoothField {
            bumps,
            sigma,
            gain: 1.0,
        };
        let mut max = 0.0f64;
        for i in 0..dims.len() {
            let v = f.eval(dims.coords(i).map(|c| c as f64));
            max = max.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
        if max > 0.0 {
            f.gain = max_norm / max;
        }
        f
    }

    pub fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let s2 = 2.0 * self.sigma * self.sigma;
        for (c, v) in &self.bumps {
            let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let w = self.gain * (-d2 / s2).exp();
            for a in 0..3 {
                out[a] += w * v[a];
            }
        }
        out
    }
}

/// Fixed/moving pair with known correspondence.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    /// Ground-truth registration field: `moving(u + τ(u)) = fixed(u)`.
    pub truth: DisplacementField,
}

/// Render a pair whose fixed→moving correspondence is `u ↦ M·(u + φ(u))`.
///
/// The moving image at `q` shows the phantom at the preimage of `q`, found by
/// fixed-point iteration on `u = M⁻¹q − φ(u)`.
pub fn render_pair(
    phantom: &Phantom,
    moving_from_fixed: &AffineTransform,
    deformation: Option<&SmoothField>,
) -> SyntheticPair {
    let inv = moving_from_fixed
        .inverse()
        .expect("invertible synthetic affine");
    let preimage = |q: [f64; 3]| {
        let r = inv.apply(q);
        match deformation {
            None => r,
            Some(phi) => {
                let mut u = r;
                for _ in 0..40 {
                    let d = phi.eval(u);
                    u = std::array::from_fn(|a| r[a] - d[a]);
                }
                u
            }
        }
    };
    let (fixed, fixed_labels) = phantom.render(|u| u);
    let (moving, moving_labels) = phantom.render(preimage);
    let truth = DisplacementField::from_fn(phantom.dims(), |u| {
        let w = match deformation {
            None => u,
            Some(phi) => {
                let d = phi.eval(u);
                std::array::from_fn(|a| u[a] + d[a])
            }
        };
        let q = moving_from_fixed.apply(w);
        std::array::from_fn(|a| q[a] - u[a])
    });
    SyntheticPair {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_labelled() {
        let dims = Dims::new(32, 32, 32);
        let a = Phantom::generate(dims, 3, 9);
        let b = Phantom::generate(dims, 3, 9);
        let (va, la) = a.render(|u| u);
        let (vb, _) = b.render(|u| u);
        assert_eq!(va, vb);
        assert_eq!(a.organ_count(), 3);
        assert_eq!(la.label_set(), vec![1, 2, 3]);
        assert_eq!(va.get(0, 0, 0), AIR_HU as f32);
    }

    #[test]
    fn identity_pair_has_zero_truth() {
        let dims = Dims::new(16, 16, 16);
        let p = Phantom::generate(dims, 2, 1);
        let pair = render_pair(&p, &AffineTransform::identity(), None);
        assert_eq!(pair.fixed, pair.moving);
        assert!(pair.truth.max_norm() < 1e-9);
    }

    #[test]
    fn smooth_field_respects_max_norm() {
        let dims = Dims::new(20, 20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = SmoothField::random(&mut rng, dims, 5, 6.0, 4.0);
        let mut max = 0.0f64;
        for i in 0..dims.len() {
            let v = f.eval(dims.coords(i).map(|c| c as f64));
            max = max.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        assert!((max - 4.0).abs() < 1e-9);
    }
}
