mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::fixture;
use pcb_sentinel_core::{FloatMap, ModelBundle};

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcb-sentinel"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PCB_SENTINEL_MODELS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_dataset_root_is_a_layout_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "profile = \"toy\"\n[dataset]\nroot = \"nowhere\"\nkind = \"mpi_pcb\"\n",
    )
    .unwrap();
    for cmd in ["train", "calibrate", "evaluate"] {
        let o = run(&cfg, &[cmd]);
        assert!(!o.status.success());
        let e = stderr(&o);
        assert!(
            e.starts_with("error: ") && e.contains("dataset layout error"),
            "{cmd}: {e}"
        );
    }
}

#[test]
fn bad_config_and_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "profile = \"enormous\"\n").unwrap();
    let o = run(&cfg, &["train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("profile"), "{}", stderr(&o));

    let o = run(&dir.path().join("absent.toml"), &["train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.toml"));

    fs::write(&cfg, "[dataset]\nroot = \".\"\nkind = \"synthetic\"\n").unwrap();
    let o = run(&cfg, &["evaluate", "--threshold", "0.3"]);
    assert!(!o.status.success());
}

#[test]
fn evaluate_refuses_uncalibrated_bundles() {
    let fx = fixture(
        1,
        1,
        false,
        "[dataset]\nroot = \"data\"\nkind = \"synthetic\"\n",
    );
    let data = fx.dir.path().join("data");
    let o = run(
        &fx.config,
        &[
            "generate-synthetic",
            data.to_str().unwrap(),
            "--normal",
            "8",
            "--anomalous",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&fx.config, &["evaluate"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(
        e.contains("grid1_1 has no calibration range") && e.contains("--calibrate"),
        "{e}"
    );
    assert!(!fx.dir.path().join("reports/report.json").exists());

    let o = run(&fx.config, &["evaluate", "--calibrate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Average"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(fx.dir.path().join("reports/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["regions"][0]["region_id"], "grid1_1");
    assert_eq!(report["regions"][0]["n_images"], 6);
    for f in [
        "report.txt",
        "roc/grid1_1_segmentation.csv",
        "roc/grid1_1_detection.csv",
    ] {
        assert!(fx.dir.path().join("reports").join(f).is_file(), "{f}");
    }
    let bundle = ModelBundle::load(fx.models_dir().join("grid1_1")).unwrap();
    assert!(bundle.norm_range.is_some());
    assert_eq!(
        bundle.operating_threshold,
        report["regions"][0]["best_iou_threshold"]
            .as_f64()
            .map(|v| v as f32)
    );
}

#[test]
fn toy_train_calibrate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pcb-sentinel.toml");
    fs::write(
        &cfg,
        "profile = \"toy\"\n[dataset]\nroot = \"data\"\nkind = \"synthetic\"\n\
         [train]\nepochs = 2\nwarmup_epochs = 1\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let o = run(
        &cfg,
        &[
            "generate-synthetic",
            data.to_str().unwrap(),
            "--normal",
            "10",
            "--anomalous",
            "2",
            "--seed",
            "5",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let annotations: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(annotations.as_array().unwrap().len(), 2);

    let o = run(&cfg, &["train", "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("grid1_1  best epoch"));
    let region = dir.path().join("models/grid1_1");
    let log = fs::read_to_string(region.join("train_log.ndjson")).unwrap();
    let epochs: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs
        .iter()
        .all(|e| e["train_loss"].as_f64().unwrap().is_finite()));
    let o = run(&cfg, &["train", "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(region.join("train_log.ndjson")).unwrap(),
        log,
        "same seed, same losses"
    );
    let bundle = ModelBundle::load(&region).unwrap();
    assert_eq!(bundle.train_manifest.as_ref().unwrap().seed, 11);
    assert!(bundle.norm_range.is_none());

    let image = data.join("anomalous/anomalous_0000.png");
    let o = run(&cfg, &["infer", image.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("calibration"));

    let o = run(&cfg, &["calibrate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ModelBundle::load(&region).unwrap().norm_range.is_some());

    let out = dir.path().join("infer");
    let o = run(
        &cfg,
        &[
            "infer",
            image.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threshold",
            "0.4",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("anomalous_0000:"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["board_id"], "anomalous_0000");
    assert_eq!(report["verdicts"][0]["threshold"].as_f64(), Some(0.4));
    assert!(report["registration"].is_null());
    let overlay = image::open(out.join("overlay.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (64, 64));
    let map = FloatMap::load(out.join("maps/grid1_1.amap")).unwrap();
    assert_eq!((map.height(), map.width()), (64, 64));

    let o = run(
        &cfg,
        &[
            "infer",
            image.to_str().unwrap(),
            "--region",
            "grid1_1",
            "--threshold",
            "2",
        ],
    );
    assert!(!o.status.success());
}

#[test]
fn models_dir_can_be_overridden_from_the_environment() {
    let fx = fixture(
        1,
        1,
        true,
        "models_dir = \"elsewhere\"\n[dataset]\nroot = \"data\"\nkind = \"synthetic\"\n",
    );
    let data = fx.dir.path().join("data");
    assert!(run(
        &fx.config,
        &[
            "generate-synthetic",
            data.to_str().unwrap(),
            "--normal",
            "4",
            "--anomalous",
            "1"
        ]
    )
    .status
    .success());
    let image = data.join("anomalous/anomalous_0000.png");
    let o = run(&fx.config, &["infer", image.to_str().unwrap()]);
    assert!(
        stderr(&o).contains("no model bundle for region grid1_1"),
        "{}",
        stderr(&o)
    );
    let o = Command::new(env!("CARGO_BIN_EXE_pcb-sentinel"))
        .arg("--config")
        .arg(&fx.config)
        .args(["infer", image.to_str().unwrap()])
        .env("PCB_SENTINEL_MODELS", fx.models_dir())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
