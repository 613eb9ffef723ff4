//! End-to-end checks of the command-line binary: every command runs
//! against a real (tiny) dataset on disk, and the behavioral contracts
//! — determinism, run.json, atomic outputs, error reporting — are
//! verified on the artifacts it writes.

use std::path::Path;
use std::process::{Command, Output};

fn radcam(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radcam"))
        .args(args)
        .env("CVFK_THREADS", threads)
        .output()
        .expect("binary should launch")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A configuration small enough to train on in seconds.
fn tiny_config(root: &Path, out: &Path, count: usize, train: usize, epochs: usize) -> String {
    format!(
        r#"{{
            // tiny end-to-end exercise profile
            "data.root": "{root}",
            "data.count": {count}, "data.train_count": {train},
            "out.dir": "{out}",
            "grid.x_max": 12.8, "grid.y_min": -6.4, "grid.y_max": 6.4,
            "grid.x_size": 0.2, "grid.y_size": 0.2, "grid.z_size": 0.2,
            "model.bev_factor": 4,
            "model.c_voxel": 4, "model.c_bev": [4, 6, 8], "model.c_cam": 4,
            "model.c_fb": 8, "model.c_b": 6, "model.c_gpe": 5,
            "model.heads": 2, "model.samples": 2, "model.u": 2,
            "model.sa_heads": 2, "model.refine_hidden": 12,
            "model.depth_bins": 6,
            "rpn.train_top_n": 8, "rpn.infer_top_n": 8,
            "rpn.sample_count": 6,
            "synth.image_width": 32, "synth.image_height": 24,
            "synth.boxes_max": 3,
            "train.epochs": {epochs}, "train.eval_every": {epochs},
            "train.checkpoint_every": {epochs}, "train.lr": 0.002
        }}"#,
        root = root.display(),
        out = out.display(),
    )
}

#[test]
fn datagen_is_deterministic_and_threads_do_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let write_cfg = |name: &str| {
        let root = dir.path().join(name);
        let cfg = dir.path().join(format!("{name}.json"));
        std::fs::write(&cfg, tiny_config(&root, &root, 5, 3, 1)).unwrap();
        (root, cfg)
    };
    let (root_a, cfg_a) = write_cfg("a");
    let (root_b, cfg_b) = write_cfg("b");
    assert_ok(&radcam(&["datagen", "--config", cfg_a.to_str().unwrap()], "1"));
    assert_ok(&radcam(&["datagen", "--config", cfg_b.to_str().unwrap()], "3"));

    for rel in [
        "dataset.json",
        "points/000000.txt",
        "labels/000002.txt",
        "calib/000004.txt",
        "image/000001.ppm",
    ] {
        let a = std::fs::read(root_a.join(rel)).unwrap();
        let b = std::fs::read(root_b.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between runs");
    }
    assert!(root_a.join("run.json").exists());
}

#[test]
fn datagen_with_zero_frames_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("empty");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, tiny_config(&root, &root, 0, 0, 1)).unwrap();
    assert_ok(&radcam(&["datagen", "--config", cfg.to_str().unwrap()], "1"));
    let manifest = std::fs::read_to_string(root.join("dataset.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["train"].as_array().unwrap().len(), 0);
    assert_eq!(v["val"].as_array().unwrap().len(), 0);
}

#[test]
fn train_eval_infer_round_trip_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, tiny_config(&root, &out, 3, 2, 2)).unwrap();
    let cfg = cfg.to_str().unwrap();

    assert_ok(&radcam(&["datagen", "--config", cfg], "1"));
    let train_out = radcam(&["train", "--config", cfg], "1");
    assert_ok(&train_out);
    let ckpt = out.join("last.ckpt");
    assert!(ckpt.exists(), "training must leave a checkpoint");
    assert!(out.join("run.json").exists());
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.trim().lines().count(), 3, "header + one row per epoch");

    let eval_dir = dir.path().join("eval");
    let eval_out = radcam(
        &[
            "eval",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "val",
            "--out",
            eval_dir.to_str().unwrap(),
        ],
        "2",
    );
    assert_ok(&eval_out);
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    assert!(stdout.contains("mAP"), "eval prints a summary: {stdout}");
    assert!(eval_dir.join("metrics.csv").exists());
    assert!(eval_dir.join("pr_curves.svg").exists());
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,ap,gt_count,det_count"));
    assert!(metrics.lines().last().unwrap().starts_with("mAP,"));

    let infer_dir = dir.path().join("infer");
    assert_ok(&radcam(
        &[
            "infer",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "all",
            "--out",
            infer_dir.to_str().unwrap(),
        ],
        "1",
    ));
    for frame in ["000000", "000001", "000002"] {
        let path = infer_dir.join("detections").join(format!("{frame}.txt"));
        assert!(path.exists(), "missing detection file {frame}.txt");
        for line in std::fs::read_to_string(&path).unwrap().lines() {
            assert_eq!(line.split_whitespace().count(), 9, "class score x y z l w h yaw");
        }
    }
}

#[test]
fn train_resumes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config(&root, &out, 2, 2, 2)).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&radcam(&["datagen", "--config", cfg], "1"));
    assert_ok(&radcam(&["train", "--config", cfg], "1"));
    let ckpt = out.join("last.ckpt");

    // Double the horizon and resume: the log continues at epoch 3.
    let out2 = dir.path().join("run2");
    let cfg2_path = dir.path().join("cfg2.json");
    std::fs::write(&cfg2_path, tiny_config(&root, &out2, 2, 2, 4)).unwrap();
    let resumed = radcam(
        &[
            "train",
            "--config",
            cfg2_path.to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
        ],
        "1",
    );
    assert_ok(&resumed);
    let log = std::fs::read_to_string(out2.join("train_log.csv")).unwrap();
    let first_row = log.trim().lines().nth(1).unwrap();
    assert!(first_row.starts_with("3,"), "resumed at epoch 3: {first_row}");
}

#[test]
fn gradcheck_prints_a_table_and_rejects_empty_selections() {
    let ok = radcam(&["gradcheck", "--only", "losses"], "1");
    assert_ok(&ok);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("losses"));
    assert!(stdout.contains("PASS"));
    assert!(stdout.contains("max_rel_err"));

    let missing = radcam(&["gradcheck", "--only", "no-such-case-xyz"], "1");
    assert!(!missing.status.success());
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.contains("no gradient-check cases match"), "{stderr}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model.does_not_exist": 1}"#).unwrap();
    let out = radcam(&["datagen", "--config", cfg.to_str().unwrap()], "1");
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown config key"), "{stderr}");
}

#[test]
fn ablate_writes_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config(&root, &out, 3, 2, 1)).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&radcam(&["datagen", "--config", cfg], "1"));
    let ablate = radcam(&["ablate", "--config", cfg, "--seeds", "0"], "1");
    assert_ok(&ablate);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,map,recall"));
    for variant in ["full", "stage1_only", "concat", "radar_only", "camera_only"] {
        assert!(
            csv.lines().any(|l| l.starts_with(&format!("{variant},median,"))),
            "missing median row for {variant} in\n{csv}"
        );
    }
    let stdout = String::from_utf8_lossy(&ablate.stdout);
    assert!(stdout.contains("variant"), "{stdout}");
}
