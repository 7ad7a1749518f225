use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sacrfp::harness::read_pnm;
use sacrfp::{Architecture, Checkpoint, DenseModel, ModelSpec, Variant};

fn sacrfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sacrfp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_arch() -> Architecture {
    Architecture {
        in_channels: 3,
        stem_channels: 8,
        stage_channels: vec![8, 16],
        blocks_per_stage: 1,
        pyramid_width: 8,
        sac_rate: 3,
    }
}

/// A quick run on the small architecture, writing into `dir`.
fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut train = serde_json::json!({
        "epochs": 1,
        "steps_per_epoch": 4,
        "batch_size": 2,
        "dataset_size": 4,
        "eval_size": 2,
        "image_size": 32,
        "architecture": small_arch(),
    });
    for (k, v) in extra.as_object().unwrap() {
        train[k] = v.clone();
    }
    let cfg = serde_json::json!({ "train": train, "output_dir": dir });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn small_plain_checkpoint(dir: &Path, use_rfp: bool) -> PathBuf {
    let spec = ModelSpec {
        arch: small_arch(),
        variant: Variant {
            use_rfp,
            ..Variant::BASELINE
        },
    };
    let path = dir.join("plain.rfpk");
    Checkpoint::from_module(&DenseModel::<f32>::new(&spec, 3).unwrap())
        .save(&path)
        .unwrap();
    path
}

#[test]
fn train_is_deterministic_and_writes_both_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let cfg = write_config(dir, serde_json::json!({}));
        let out = sacrfp(&["train", "--config", s(&cfg)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["metrics.txt", "model.rfpk"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let text = fs::read_to_string(a.path().join("metrics.txt")).unwrap();
    assert!(text.starts_with("step,loss\n1,"));
    assert!(text.contains("# steps: 4"));

    let cfg = write_config(a.path(), serde_json::json!({}));
    let out = sacrfp(&["--seed", "9", "train", "--config", s(&cfg)]);
    assert!(out.status.success());
    assert_ne!(
        fs::read(a.path().join("metrics.txt")).unwrap(),
        fs::read(b.path().join("metrics.txt")).unwrap()
    );
}

#[test]
fn invalid_config_values_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "lr": -1.0 }));
    let out = sacrfp(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
    assert!(!dir.path().join("model.rfpk").exists());

    let cfg = write_config(dir.path(), serde_json::json!({ "learning_rate": 0.1 }));
    let out = sacrfp(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn diverging_training_exits_3_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "lr": 1e6 }));
    let out = sacrfp(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss at step"));
    let text = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(text.contains("# non_finite: true"));
    assert!(!dir.path().join("model.rfpk").exists());
}

#[test]
fn convert_verifies_and_is_stable_on_its_own_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let plain = small_plain_checkpoint(dir.path(), true);
    let sac = dir.path().join("sac.rfpk");
    let again = dir.path().join("again.rfpk");

    let out = sacrfp(&["convert", s(&plain), s(&sac), "--verify", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max diff"));
    assert!(Checkpoint::load(&sac).unwrap().has_sac());

    let out = sacrfp(&["convert", s(&sac), s(&again), "--verify", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&sac).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn convert_rejects_damaged_or_mismatched_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let plain = small_plain_checkpoint(dir.path(), true);
    let out_path = dir.path().join("out.rfpk");

    let mut bytes = fs::read(&plain).unwrap();
    bytes.truncate(bytes.len() / 2);
    let broken = dir.path().join("broken.rfpk");
    fs::write(&broken, bytes).unwrap();
    let out = sacrfp(&["convert", s(&broken), s(&out_path), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));

    // the default config describes a different architecture
    let out = sacrfp(&["convert", s(&plain), s(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    assert!(!out_path.exists());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let out = sacrfp(&["gradcheck", "--layer", "sac", "--layer", "fusion"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("sac"));
    assert!(!table.contains("conv "));

    let out = sacrfp(&["gradcheck", "--layer", "conv", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));

    let out = sacrfp(&["gradcheck", "--layer", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_gradcheck_suite_passes() {
    let out = sacrfp(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 10);
}

#[test]
fn viz_switch_on_a_fresh_conversion_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let plain = small_plain_checkpoint(dir.path(), true);
    let sac = dir.path().join("sac.rfpk");
    assert!(sacrfp(&["convert", s(&plain), s(&sac), "--config", s(&cfg)]).status.success());

    let maps = dir.path().join("maps");
    let out = sacrfp(&["viz-switch", "--checkpoint", s(&sac), "--config", s(&cfg), "--out-dir", s(&maps)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = fs::read_dir(&maps).unwrap().map(|e| e.unwrap().path()).collect();
    // stem plus one SAC conv per block, in each of the two unrolled backbones
    assert_eq!(files.len(), 2 * (1 + 2));
    for f in &files {
        let p = read_pnm(&fs::read(f).unwrap()).unwrap();
        assert_eq!(p.maxval, 255);
        assert!(p.samples.iter().all(|&v| v == 255));
    }
    let stem = read_pnm(&fs::read(maps.join("pyramid.backbone.0.stem.pgm")).unwrap()).unwrap();
    assert_eq!((stem.width, stem.height), (16, 16));

    let only = dir.path().join("only");
    let out = sacrfp(&[
        "viz-switch", "--checkpoint", s(&sac), "--config", s(&cfg), "--out-dir", s(&only), "--layer", "stages/1",
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read_dir(&only).unwrap().count(), 2);
}

#[test]
fn viz_switch_reads_a_pgm_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let plain = small_plain_checkpoint(dir.path(), true);
    let sac = dir.path().join("sac.rfpk");
    assert!(sacrfp(&["convert", s(&plain), s(&sac), "--config", s(&cfg)]).status.success());

    let image = dir.path().join("in.pgm");
    let pixels: Vec<u8> = (0..32 * 64).map(|i| (i % 251) as u8).collect();
    sacrfp::harness::write_pgm(&image, 64, 32, &pixels).unwrap();
    let maps = dir.path().join("maps");
    let out = sacrfp(&[
        "viz-switch", "--checkpoint", s(&sac), "--config", s(&cfg), "--out-dir", s(&maps), "--image", s(&image),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stem = read_pnm(&fs::read(maps.join("pyramid.backbone.0.stem.pgm")).unwrap()).unwrap();
    assert_eq!((stem.width, stem.height), (32, 16));

    let odd = dir.path().join("odd.pgm");
    sacrfp::harness::write_pgm(&odd, 30, 30, &[0; 900]).unwrap();
    let out = sacrfp(&[
        "viz-switch", "--checkpoint", s(&sac), "--config", s(&cfg), "--out-dir", s(&maps), "--image", s(&odd),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn viz_switch_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let maps = dir.path().join("maps");

    let missing = dir.path().join("nope.rfpk");
    let out = sacrfp(&["viz-switch", "--checkpoint", s(&missing), "--config", s(&cfg), "--out-dir", s(&maps)]);
    assert_eq!(out.status.code(), Some(2));

    let plain = small_plain_checkpoint(dir.path(), true);
    let out = sacrfp(&["viz-switch", "--checkpoint", s(&plain), "--config", s(&cfg), "--out-dir", s(&maps)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no SAC layers"));
    assert!(!maps.exists());
}

#[test]
fn eval_prints_per_level_iou() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "use_sac": false, "use_rfp": false }));
    assert!(sacrfp(&["train", "--config", s(&cfg)]).status.success());
    let ck = dir.path().join("model.rfpk");
    let out = sacrfp(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("iou level 0:") && text.contains("iou level 1:") && text.contains("mean iou:"));
}
