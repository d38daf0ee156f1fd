//! The `cmdistill` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmdistill(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmdistill"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("CMD_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmdistill(&["gradcheck", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn indivisible_instance_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.txt"), "instance_px = 5\nimage_crop_px = 56\n").unwrap();
    let o = cmdistill(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("must divide crop size 56"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.txt"), "learning_rat = 0.1\n").unwrap();
    let o = cmdistill(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"));
    let o = cmdistill(
        &["probe", "--checkpoint", "nope/ckpt-0001.bin", "--data", "data"],
        dir.path(),
    );
    assert!(!o.status.success());
    let o = cmdistill(&["bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("spec.txt"),
        "samples_per_class = 8\nimage_px = 16\nglyph_px = 4\n",
    )
    .unwrap();
    fs::write(
        p.join("cfg.txt"),
        "image_crop_px = 16\nregion_crop_px = 8\ninstance_px = 8\nn_region_crops = 2\n\
         hidden_dim = 8\nembed_dim = 8\nhead_dim = 8\nepochs = 2\nbatch_size = 16\n",
    )
    .unwrap();
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    ok(cmdistill(&["gen-data", "--spec", "spec.txt", "--out", "data"], p));
    assert!(p.join("data/manifest.txt").exists());
    ok(cmdistill(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "run"],
        p,
    ));
    for f in ["config.resolved", "metrics.csv", "ckpt-0002.bin"] {
        assert!(p.join("run").join(f).exists(), "{f} missing");
    }
    let probe = ok(cmdistill(
        &[
            "probe",
            "--checkpoint",
            "run/ckpt-0002.bin",
            "--data",
            "data",
            "--label-fraction",
            "0.5",
        ],
        p,
    ));
    assert!(probe.starts_with("top-1"));
    let retrieve = ok(cmdistill(
        &["retrieve", "--checkpoint", "run/ckpt-0002.bin", "--data", "data"],
        p,
    ));
    assert!(retrieve.contains("Rank-1") && retrieve.contains("mAP"));
    let diag = ok(cmdistill(
        &[
            "diagnose",
            "--checkpoint",
            "run/ckpt-0002.bin",
            "--data",
            "data",
            "--objective",
            "image_only",
            "--samples",
            "4",
        ],
        p,
    ));
    assert!(diag.contains("glyph gradient fraction"));
    for f in [
        "report-probe.csv",
        "report-retrieve.csv",
        "report-diagnose-image_only.csv",
    ] {
        assert!(p.join("run").join(f).exists(), "{f} missing");
    }

    // the same command twice gives the same artifacts
    ok(cmdistill(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "run2"],
        p,
    ));
    assert_eq!(
        fs::read(p.join("run/metrics.csv")).unwrap(),
        fs::read(p.join("run2/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("run/ckpt-0002.bin")).unwrap(),
        fs::read(p.join("run2/ckpt-0002.bin")).unwrap()
    );
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("spec.txt"),
        "samples_per_class = 4\nimage_px = 16\nglyph_px = 4\n",
    )
    .unwrap();
    fs::write(
        p.join("cfg.txt"),
        "image_crop_px = 16\nregion_crop_px = 8\ninstance_px = 8\nn_region_crops = 2\n\
         hidden_dim = 8\nembed_dim = 8\nhead_dim = 8\nepochs = 1\nbatch_size = 16\n",
    )
    .unwrap();
    assert!(cmdistill(&["gen-data", "--spec", "spec.txt", "--out", "data"], p)
        .status
        .success());
    let o = Command::new(env!("CARGO_BIN_EXE_cmdistill"))
        .args(["train", "--config", "cfg.txt", "--data", "data", "--out", "run"])
        .current_dir(p)
        .env("CMD_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = fs::read_to_string(p.join("run/config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 42"), "{resolved}");
}
