mod common;

use embreg::synthetic::{render_pair, Phantom, SmoothField};
use embreg::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn match_set(fixed: Vec<[f64; 3]>, moving: Vec<[f64; 3]>) -> MatchSet {
    let k = fixed.len();
    MatchSet {
        fixed_points: fixed,
        moving_points: moving,
        similarities: vec![1.0; k],
        theta: 0.7,
        candidates: k,
    }
}

fn known_affine() -> AffineTransform {
    let (s, c) = 10f64.to_radians().sin_cos();
    let k = 1.05;
    // rotation about z acts on (y, x)
    AffineTransform::from_parts(
        [[k, 0.0, 0.0], [0.0, k * c, -k * s], [0.0, k * s, k * c]],
        [3.0, -2.0, 1.0],
    )
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Smooth analytic test image, values in [-1, 1].
fn smooth_image(dims: Dims) -> Volume {
    Volume::from_fn(dims, |z, y, x| {
        let (z, y, x) = (z as f32, y as f32, x as f32);
        ((0.21 * x).sin() * (0.17 * y).cos() + 0.5 * (0.13 * z + 0.07 * x).sin()) / 1.5
    })
}

#[test]
fn exact_matches_recover_known_affine() {
    let a0 = known_affine();
    let mut rng = common::rng(1);
    let moving: Vec<[f64; 3]> = (0..30)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..40.0)))
        .collect();
    let fixed = moving.iter().map(|&m| a0.apply(m)).collect();
    let fit = fit_affine(&match_set(fixed, moving)).unwrap();
    let (got, want) = (fit.transform.matrix(), a0.matrix());
    for r in 0..4 {
        for c in 0..4 {
            assert!((got[r][c] - want[r][c]).abs() < 1e-4);
        }
    }
    assert!(fit.residual_rms <= 1e-8);
    assert_eq!(got[3], [0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn noisy_matches_give_small_center_error() {
    let a0 = known_affine();
    let center = [24.0; 3];
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut total = 0.0;
    for seed in 0..20 {
        let mut rng = common::rng(100 + seed);
        let moving: Vec<[f64; 3]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..48.0)))
            .collect();
        let fixed = moving
            .iter()
            .map(|&m| {
                let p = a0.apply(m);
                std::array::from_fn(|a| p[a] + noise.sample(&mut rng))
            })
            .collect();
        let fit = fit_affine(&match_set(fixed, moving)).unwrap();
        total += dist(fit.transform.apply(center), a0.apply(center));
    }
    let mean = total / 20.0;
    assert!(mean < 0.2, "mean center error {mean}");
}

#[test]
fn affine_round_trip_is_close_in_interior() {
    let dims = Dims::new(40, 40, 40);
    let v = smooth_image(dims);
    let c = 19.5;
    let a = {
        let (s, co) = 8f64.to_radians().sin_cos();
        let lin = [[1.0, 0.0, 0.0], [0.0, co, -s], [0.0, s, co]];
        let t: [f64; 3] =
            std::array::from_fn(|i| 1.5 + c - (0..3).map(|j| lin[i][j] * c).sum::<f64>());
        AffineTransform::from_parts(lin, t)
    };
    let back = apply_affine(&apply_affine(&v, &a).unwrap(), &a.inverse().unwrap()).unwrap();
    let mut worst = 0.0f32;
    for z in 10..30 {
        for y in 10..30 {
            for x in 10..30 {
                worst = worst.max((back.get(z, y, x) - v.get(z, y, x)).abs());
            }
        }
    }
    assert!(worst < 0.02, "max interior error {worst}");
}

#[test]
fn coarse_field_sign_registers_translated_phantom() {
    let dims = Dims::new(40, 40, 40);
    let ph = Phantom::generate(dims, 3, 9);
    let shift = AffineTransform::from_parts(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0, 3.0, 0.0],
    );
    let pair = render_pair(&ph, &shift, None);
    let f = window_normalize(&pair.fixed, -800.0, 400.0).unwrap();
    let m = window_normalize(&pair.moving, -800.0, 400.0).unwrap();
    let mask = compute_body_mask(&f, -0.5).unwrap();
    let set = grid_match(
        &synth_descriptors(&f, 16).unwrap(),
        &synth_descriptors(&m, 16).unwrap(),
        &mask,
        &MatchParams::default(),
    )
    .unwrap();
    let tau = build_coarse_field(&set, dims, 8).unwrap();
    let warped = warp_by_field(&m, &tau).unwrap();
    let before = local_ncc_loss(&f, &m, &mask, 2).unwrap();
    let after = local_ncc_loss(&f, &warped, &mask, 2).unwrap();
    assert!(after > before, "similarity {before} -> {after}");
    let mid = tau.at(dims.index(20, 20, 20));
    assert!((mid[1] - 3.0).abs() < 1.0, "{mid:?}");
}

#[test]
fn composed_warp_matches_two_step_warp() {
    let dims = Dims::new(32, 32, 32);
    let v = smooth_image(dims);
    let mut rng = common::rng(4);
    let a = SmoothField::random(&mut rng, dims, 4, 6.0, 2.5);
    let b = SmoothField::random(&mut rng, dims, 4, 6.0, 2.5);
    let outer = DisplacementField::from_fn(dims, |p| a.eval(p));
    let inner = DisplacementField::from_fn(dims, |p| b.eval(p));
    let two = warp_by_field(&warp_by_field(&v, &outer).unwrap(), &inner).unwrap();
    let one = warp_by_field(&v, &compose_fields(&outer, &inner).unwrap()).unwrap();
    let mut worst = 0.0f32;
    for z in 6..26 {
        for y in 6..26 {
            for x in 6..26 {
                worst = worst.max((two.get(z, y, x) - one.get(z, y, x)).abs());
            }
        }
    }
    assert!(worst < 0.02, "max interior difference {worst}");
    let zero = DisplacementField::zeros(dims);
    let same = compose_fields(&outer, &zero).unwrap();
    for i in 0..dims.len() {
        let (p, q) = (same.at(i), outer.at(i));
        assert!(dist(p, q) < 1e-6);
    }
}

fn random_grid_matches(rng: &mut impl Rng, dims: Dims, stride: usize, keep: f64) -> MatchSet {
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    for z in (0..dims.0[0]).step_by(stride) {
        for y in (0..dims.0[1]).step_by(stride) {
            for x in (0..dims.0[2]).step_by(stride) {
                if fixed.is_empty() || rng.random_bool(keep) {
                    let f = [z as f64, y as f64, x as f64];
                    fixed.push(f);
                    moving.push(std::array::from_fn(|a| {
                        f[a] + rng.random_range(-5i32..=5) as f64
                    }));
                }
            }
        }
    }
    match_set(fixed, moving)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn translation_equivariance(seed in 0u64..10_000, t in prop::array::uniform3(-20.0f64..20.0)) {
        let mut rng = common::rng(seed);
        let moving: Vec<[f64; 3]> = (0..12).map(|_| std::array::from_fn(|_| rng.random_range(0.0..30.0))).collect();
        let fixed: Vec<[f64; 3]> = moving.iter().map(|m| std::array::from_fn(|a| m[a] + rng.random_range(-2.0..2.0))).collect();
        let shifted = fixed.iter().map(|f| std::array::from_fn(|a| f[a] + t[a])).collect();
        let a = fit_affine(&match_set(fixed, moving.clone())).unwrap().transform;
        let b = fit_affine(&match_set(shifted, moving)).unwrap().transform;
        for r in 0..3 {
            prop_assert!((b.translation()[r] - a.translation()[r] - t[r]).abs() < 1e-9);
            for c in 0..3 {
                prop_assert!((b.matrix()[r][c] - a.matrix()[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coarse_field_is_exact_at_knots_and_bounded(seed in 0u64..10_000) {
        let mut rng = common::rng(seed);
        let dims = common::random_dims(&mut rng, 5, 20);
        let stride = rng.random_range(2..5);
        let set = random_grid_matches(&mut rng, dims, stride, 0.7);
        let tau = build_coarse_field(&set, dims, stride).unwrap();
        let bound = set.offsets().iter().map(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()).fold(0.0, f64::max);
        for (f, o) in set.fixed_points.iter().zip(set.offsets()) {
            let got = tau.at(dims.index(f[0] as usize, f[1] as usize, f[2] as usize));
            prop_assert!(dist(got, o) < 1e-6);
        }
        for i in 0..dims.len() {
            let v = tau.at(i);
            prop_assert!((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() <= bound + 1e-5);
        }
    }

    #[test]
    fn zero_field_warps_are_identity(seed in 0u64..10_000) {
        let mut rng = common::rng(seed);
        let dims = common::random_dims(&mut rng, 1, 7);
        let zero = DisplacementField::zeros(dims);
        let v = common::smooth_volume(&mut rng, dims);
        let wv = warp_by_field(&v, &zero).unwrap();
        prop_assert_eq!(wv.data(), v.data());
        let e = common::random_embedding(&mut rng, dims, 5);
        let w = warp_embedding_by_field(&e, &zero).unwrap();
        prop_assert!(w.data().iter().zip(e.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let l = LabelVolume::new(dims, (0..dims.len()).map(|_| rng.random_range(0u16..4)).collect()).unwrap();
        let wl = warp_labels_by_field(&l, &zero).unwrap();
        prop_assert_eq!(wl.data(), l.data());
    }
}
