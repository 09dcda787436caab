//! End-to-end checks of the `unirit` binary.

use std::path::Path;
use std::process::Command;

fn unirit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unirit"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, family: &str, count: usize, seed: u64) {
    run_ok(unirit().args([
        "synth",
        "--family",
        family,
        "--count",
        &count.to_string(),
        "--points",
        "192",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
}

#[test]
fn synth_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth(&a, "sphere,torus", 3, 11);
    synth(&b, "sphere,torus", 3, 11);
    for name in [
        "manifest.json",
        "pair_0000_source.xyz",
        "pair_0000_target.xyz",
        "pair_0002_source.xyz",
        "pair_0002_target.xyz",
    ] {
        let xa = std::fs::read(a.join(name)).unwrap();
        let xb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(xa, xb, "{name} differs between identical synth runs");
    }
}

#[test]
fn train_register_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "sphere", 2, 3);

    let run = tmp.path().join("run");
    run_ok(unirit().args([
        "train",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--profile",
        "fast",
        "--epochs",
        "2",
        "--points",
        "96",
        "--seed",
        "5",
    ]));
    let ckpt = run.join("checkpoint.json");
    assert!(ckpt.exists());
    assert!(run.join("loss_history.json").exists());
    assert!(run.join("resolved_config.json").exists());

    let reg = tmp.path().join("reg");
    run_ok(unirit().args([
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--source",
        data.join("pair_0000_source.xyz").to_str().unwrap(),
        "--target",
        data.join("pair_0000_target.xyz").to_str().unwrap(),
        "--out",
        reg.to_str().unwrap(),
    ]));
    assert!(reg.join("warped.xyz").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reg.join("report.json")).unwrap()).unwrap();
    assert!(report["rmse"].as_f64().unwrap().is_finite());
    assert!(report["inference_seconds"].as_f64().unwrap() >= 0.0);

    let eval = tmp.path().join("eval");
    run_ok(unirit()
        .env("UNIRIT_THREADS", "1")
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("manifest.json").to_str().unwrap(),
            "--out",
            eval.to_str().unwrap(),
        ]));
    let records: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("records.json")).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(eval.join("aggregate.csv")).unwrap();
    assert!(csv.starts_with("family,count,"));
    assert!(csv.lines().count() >= 3); // header + sphere + overall
}

#[test]
fn analyze_gmm_writes_symmetric_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "sphere,blob", 4, 21);

    let out = tmp.path().join("gmm");
    run_ok(unirit().args([
        "analyze-gmm",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--components",
        "4",
        "--samples",
        "64",
        "--repetitions",
        "2",
        "--picks",
        "3",
    ]));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("divergence.json")).unwrap())
            .unwrap();
    let labels = m["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 2);
    let v = m["values"].as_array().unwrap();
    let v01 = v[0].as_array().unwrap()[1].as_f64().unwrap();
    let v10 = v[1].as_array().unwrap()[0].as_f64().unwrap();
    assert!((v01 - v10).abs() <= 1e-12, "matrix not symmetric");
    let csv = std::fs::read_to_string(out.join("divergence.csv")).unwrap();
    assert!(csv.starts_with("label,"));
}

#[test]
fn invalid_arguments_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let status = unirit()
        .args([
            "synth",
            "--family",
            "dodecahedron",
            "--count",
            "1",
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    let status = unirit().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
}

#[test]
fn config_file_overrides_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "sphere", 1, 2);
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"epochs": 7, "alpha": 0.25}"#).unwrap();

    let run = tmp.path().join("run");
    run_ok(unirit().args([
        "train",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--profile",
        "fast",
        "--epochs",
        "1",
        "--points",
        "64",
    ]));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("resolved_config.json")).unwrap())
            .unwrap();
    let p = &resolved["params"];
    assert_eq!(p["epochs"]["value"], 1);
    assert_eq!(p["epochs"]["source"], "flag");
    assert_eq!(p["alpha"]["value"], 0.25);
    assert_eq!(p["alpha"]["source"], "config-file");
    assert_eq!(p["lr"]["source"], "default");
}
