use std::path::Path;
use std::process::{Command, Output};

fn embreg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embreg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn phantom_then_register_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = embreg(
        &[
            "phantom", "--size", "32", "--organs", "3", "--output", "pair",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = embreg(
        &[
            "register",
            "pair/config.toml",
            "--set",
            "deform.max_iterations=[10, 5, 5]",
            "--set",
            "output.slices=false",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for stage in ["affine", "coarse", "deform"] {
        assert!(stdout.contains(stage), "{stdout}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("pair/run/report.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 3);
}

#[test]
fn stage_pipeline_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(embreg(
        &["phantom", "--size", "32", "--deform", "0", "--output", "p"],
        d
    )
    .status
    .success());
    for (vol, out) in [("p/fixed.mhd", "f.evol"), ("p/moving.mhd", "m.evol")] {
        let o = embreg(&["embed", "synth", vol, "-o", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let steps: [&[&str]; 4] = [
        &[
            "match",
            "f.evol",
            "m.evol",
            "--mask",
            "p/fixed.mhd",
            "--grid-stride",
            "4",
            "-o",
            "m.csv",
        ],
        &["fit-affine", "m.csv", "-o", "a.txt"],
        &[
            "warp",
            "p/moving_labels.mhd",
            "--affine",
            "a.txt",
            "--kind",
            "labels",
            "-o",
            "wl.mhd",
        ],
        &[
            "metrics",
            "p/fixed_labels.mhd",
            "wl.mhd",
            "--json",
            "metrics.json",
        ],
    ];
    for args in steps {
        let o = embreg(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert!(m["mean_dice"].as_f64().unwrap() > 0.0);
    let o = embreg(
        &[
            "slices",
            "p/fixed.mhd",
            "--labels",
            "p/fixed_labels.mhd",
            "--hu-window",
            "-800",
            "400",
            "-o",
            "s",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("s/fixed.png").exists());
}

#[test]
fn failures_exit_nonzero_with_tagged_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(embreg(&["phantom", "--size", "24", "--output", "p"], d)
        .status
        .success());
    let o = embreg(
        &["register", "p/config.toml", "--set", "stages=[\"coarse\"]"],
        d,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));
    let o = embreg(&["fit-affine", "missing.csv", "-o", "a.txt"], d);
    assert!(!o.status.success());
    assert!(
        stderr(&o).starts_with("embreg: fit-affine"),
        "{}",
        stderr(&o)
    );
    let o = embreg(&["slices", "p/fixed.mhd", "--index", "24", "-o", "s"], d);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("slices") && stderr(&o).contains("out of range"),
        "{}",
        stderr(&o)
    );
    let o = embreg(
        &["register", "p/config.toml", "--set", "moving=\"nope.mhd\""],
        d,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`load`"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = embreg(
        &["gradcheck", "--size", "10", "--samples", "20"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}
