mod common;

use embreg::io::{self, metaimage};
use embreg::*;
use proptest::prelude::*;
use tempfile::tempdir;

#[test]
fn short_zero_volume_loads() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("z.mhd");
    metaimage::write(
        &path,
        Dims::new(4, 4, 4),
        [2.0; 3],
        [0.0; 3],
        metaimage::ElementType::Short,
        &[0.0; 64],
    )
    .unwrap();
    let v = io::load_volume(&path).unwrap();
    assert_eq!(v.dims(), Dims::new(4, 4, 4));
    assert_eq!(v.spacing(), [2.0; 3]);
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn short_payload_is_a_size_mismatch() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("z.mhd");
    metaimage::write(
        &path,
        Dims::new(4, 4, 4),
        [1.0; 3],
        [0.0; 3],
        metaimage::ElementType::Short,
        &[0.0; 64],
    )
    .unwrap();
    let raw = dir.path().join("z.raw");
    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..126]).unwrap();
    assert!(matches!(
        io::load_volume(&path),
        Err(Error::SizeMismatch {
            expected: 128,
            found: 126
        })
    ));
}

#[test]
fn ramp_round_trips_byte_identical() {
    let dir = tempdir().unwrap();
    let v = Volume::from_fn(Dims::new(3, 3, 3), |z, y, x| {
        (9 * z + 3 * y + x) as f32 - 13.5
    })
    .with_geometry([1.5, 2.0, 2.5], [1.0, -2.0, 3.0])
    .unwrap();
    for name in ["a.mhd", "a.evol"] {
        let path = dir.path().join(name);
        io::save_volume(&v, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = io::load_volume(&path).unwrap();
        assert_eq!(back, v);
        io::save_volume(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn unwritable_path_is_io_error() {
    let v = Volume::filled(Dims::new(2, 2, 2), 0.0);
    let r = io::save_volume(&v, std::path::Path::new("/nonexistent-dir/x/v.evol"));
    assert!(matches!(r, Err(Error::Io { .. })));
}

#[test]
fn constant_field_round_trips() {
    let dir = tempdir().unwrap();
    let f = DisplacementField::constant(Dims::new(3, 4, 5), [1.0, 2.0, 3.0]);
    let path = dir.path().join("f.evol");
    io::save_field(&f, &path).unwrap();
    assert_eq!(io::load_field(&path).unwrap(), f);
}

#[test]
fn embedding_round_trips() {
    let dir = tempdir().unwrap();
    let e = common::random_embedding(&mut common::rng(3), Dims::new(3, 4, 2), 5);
    let path = dir.path().join("e.evol");
    io::save_embedding(&e, &path).unwrap();
    let back = io::load_embedding(&path).unwrap();
    assert_eq!(back.data(), e.data());
}

#[test]
fn labels_round_trip() {
    let dir = tempdir().unwrap();
    let l = LabelVolume::new(
        Dims::new(2, 3, 4),
        (0..24).map(|i| (i % 4) as u16).collect(),
    )
    .unwrap();
    for name in ["l.mhd", "l.evol"] {
        let path = dir.path().join(name);
        io::save_labels(&l, &path).unwrap();
        assert_eq!(io::load_labels(&path).unwrap().data(), l.data());
    }
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-2000.0f32..2000.0, d * h * w).prop_map(move |data| {
            Volume::new(Dims::new(d, h, w), [1.0, 1.5, 2.0], [0.5, 0.0, -1.0], data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_output_in_unit_range_and_monotone(v in volume_strategy(), lo in -1500.0f32..0.0, width in 1.0f32..2000.0) {
        let out = window_normalize(&v, lo, lo + width).unwrap();
        prop_assert!(out.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        for (i, &a) in v.data().iter().enumerate() {
            for (j, &b) in v.data().iter().enumerate() {
                if a <= b {
                    prop_assert!(out.data()[i] <= out.data()[j]);
                }
            }
        }
    }

    #[test]
    fn resample_at_source_spacing_is_identity(v in volume_strategy()) {
        let v = v.with_geometry([2.0; 3], [0.0; 3]).unwrap();
        let r = resample_isotropic(&v, 2.0).unwrap();
        prop_assert_eq!(r.dims(), v.dims());
        for (a, b) in r.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn save_load_is_bitwise(v in volume_strategy()) {
        let dir = tempdir().unwrap();
        for name in ["p.mhd", "p.evol"] {
            let path = dir.path().join(name);
            io::save_volume(&v, &path).unwrap();
            let back = io::load_volume(&path).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert_eq!(back.spacing(), v.spacing());
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn mask_ignores_subthreshold_voxels_outside_body(
        extra in prop::collection::vec((0usize..12, 0usize..12, 0usize..12, -1.0f32..-0.51), 0..30)
    ) {
        let dims = Dims::new(12, 12, 12);
        let base = Volume::from_fn(dims, |z, y, x| {
            if (3..9).contains(&z) && (3..9).contains(&y) && (3..9).contains(&x) { 0.5 } else { -1.0 }
        });
        let mut data = base.data().to_vec();
        for (z, y, x, v) in extra {
            let i = dims.index(z, y, x);
            if data[i] < 0.0 {
                data[i] = v;
            }
        }
        let noisy = Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap();
        let a = compute_body_mask(&base, -0.5).unwrap();
        let b = compute_body_mask(&noisy, -0.5).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.voxel_count(), 216);
    }
}
