mod common;

use embreg::slices::PALETTE;
use embreg::synthetic::{random_affine, render_pair, Phantom};
use embreg::*;
use tempfile::tempdir;

fn read_png(path: &std::path::Path) -> (png::OutputInfo, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info, buf)
}

#[test]
fn self_registration_is_identity() {
    let dir = tempdir().unwrap();
    let ph = Phantom::generate(Dims::new(40, 40, 40), 3, 21);
    let (vol, labels) = ph.render(|u| u);
    io::save_volume(&vol, &dir.path().join("a.mhd")).unwrap();
    io::save_labels(&labels, &dir.path().join("a_labels.mhd")).unwrap();
    let mut cfg = PipelineConfig::new(
        dir.path().join("a.mhd"),
        dir.path().join("a.mhd"),
        dir.path().join("out"),
    );
    cfg.fixed_labels = Some(dir.path().join("a_labels.mhd"));
    cfg.moving_labels = Some(dir.path().join("a_labels.mhd"));
    cfg.output.correlation_feature = true;
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.stages.len(), 3);
    for s in &report.stages {
        assert_eq!(s.metrics.as_ref().unwrap().mean_dice, 1.0, "{}", s.stage);
    }
    assert!(
        report.total_mean_displacement < 0.1,
        "{}",
        report.total_mean_displacement
    );
    let out = dir.path().join("out");
    for f in [
        "report.json",
        "total_field.evol",
        "affine/affine.txt",
        "deform/loss.csv",
        "slices/deform.png",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let corr = io::evol::read(&out.join("deform/correlation.evol")).unwrap();
    assert_eq!(corr.channels, 27);
    let n = corr.dims.len();
    assert!(corr.data[13 * n..14 * n]
        .iter()
        .all(|&v| (v - 1.0).abs() < 1e-4));
}

#[test]
fn affine_stage_registers_affine_pair() {
    let dir = tempdir().unwrap();
    // Nearest-neighbour label warping caps Dice near 0.96 at 96³ even with the
    // true field, so this needs organs large in voxel terms.
    let dims = Dims::new(128, 128, 128);
    let ph = Phantom::generate(dims, 4, 31);
    let a = random_affine(&mut common::rng(31), dims.center(), 10.0, (0.93, 1.07), 6.0);
    let pair = render_pair(&ph, &a.inverse().unwrap(), None);
    let mut cfg = common::write_pair(&pair, dir.path(), "out");
    cfg.stages = vec![Stage::Affine];
    cfg.output.slices = false;
    let report = run_pipeline(&cfg).unwrap();
    let dice = report
        .stage(Stage::Affine)
        .unwrap()
        .metrics
        .as_ref()
        .unwrap()
        .mean_dice;
    assert!(dice > 0.95, "affine Dice {dice}");
    let jac = report
        .stage(Stage::Affine)
        .unwrap()
        .metrics
        .as_ref()
        .unwrap()
        .jacobian_std
        .unwrap();
    assert!(jac < 1e-6, "{jac}");
}

#[test]
fn coarse_without_affine_is_a_config_error() {
    let mut cfg = PipelineConfig::new("f.mhd", "m.mhd", "out");
    cfg.stages = vec![Stage::Coarse];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(run_pipeline(&cfg).is_err());
}

#[test]
fn missing_input_reports_load_stage() {
    let dir = tempdir().unwrap();
    let cfg = PipelineConfig::new(
        dir.path().join("none.mhd"),
        dir.path().join("none.mhd"),
        dir.path().join("o"),
    );
    let msg = run_pipeline(&cfg).unwrap_err().to_string();
    assert!(msg.contains("load"), "{msg}");
}

#[test]
fn constant_minus_one_slice_is_black() {
    let dir = tempdir().unwrap();
    let v = Volume::filled(Dims::new(4, 5, 6), -1.0);
    let paths = emit_slices(
        &[SlicePanel {
            name: "v",
            volume: &v,
            labels: None,
        }],
        0,
        2,
        dir.path(),
    )
    .unwrap();
    let (info, buf) = read_png(&paths[0]);
    assert_eq!((info.width, info.height), (6, 5));
    assert!(buf.iter().all(|&b| b == 0));
}

#[test]
fn slice_index_past_end_is_range_error() {
    let dir = tempdir().unwrap();
    let v = Volume::filled(Dims::new(4, 5, 6), 0.0);
    let r = emit_slices(
        &[SlicePanel {
            name: "v",
            volume: &v,
            labels: None,
        }],
        0,
        4,
        dir.path(),
    );
    assert!(matches!(
        r,
        Err(Error::IndexOutOfRange { index: 4, len: 4 })
    ));
}

#[test]
fn square_label_contour_is_its_boundary() {
    let dir = tempdir().unwrap();
    let dims = Dims::new(3, 12, 14);
    let v = Volume::filled(dims, 0.0);
    let inside = |y: usize, x: usize| (3..9).contains(&y) && (4..10).contains(&x);
    let labels = LabelVolume::new(
        dims,
        (0..dims.len())
            .map(|i| {
                let [_, y, x] = dims.coords(i);
                u16::from(inside(y, x))
            })
            .collect(),
    )
    .unwrap();
    let panel = SlicePanel {
        name: "l",
        volume: &v,
        labels: Some(&labels),
    };
    let paths = emit_slices(&[panel], 0, 1, dir.path()).unwrap();
    let (info, buf) = read_png(&paths[0]);
    assert_eq!(info.color_type, png::ColorType::Rgb);
    for y in 0..12 {
        for x in 0..14 {
            let edge = inside(y, x) && (y == 3 || y == 8 || x == 4 || x == 9);
            let px = &buf[3 * (y * 14 + x)..3 * (y * 14 + x) + 3];
            if edge {
                assert_eq!(px, PALETTE[0], "({y}, {x})");
            } else {
                assert_eq!(px, [128, 128, 128], "({y}, {x})");
            }
        }
    }
}
