use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use imse_core::io;
use imse_core::Image;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imse-lab"))
        .args(args)
        .env("IMSE_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_evaluator_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("evaluator.json");
    fs::write(&p, r#"{"channels": [2, 3, 4], "residual_blocks": 1, "steps": 3, "batch_size": 2}"#).unwrap();
    p
}

#[test]
fn gen_data_writes_pairs_with_masks_and_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--seed", "3", "--count", "2", "--size", "32", "--out", s(&out)]);
    for k in 0..2 {
        let d = out.join(format!("pair_{k}"));
        let m: Image = io::read_image_raw(&d.join("moving.raw")).unwrap();
        assert_eq!(m.shape(), (32, 32));
        let f: imse_core::Field = io::read_field_raw(&d.join("true_field.raw")).unwrap();
        assert_eq!(f.shape(), (32, 32));
        assert!(d.join("target.pgm").exists());
        assert!(d.join("masks/moving_structure_1.pgm").exists());
        assert!(d.join("masks/target_structure_1.pgm").exists());
    }
    let resolved: serde_json::Value = io::read_json(&out.join("resolved_config.json")).unwrap();
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["size"], 32);
}

#[test]
fn zero_strength_pairs_have_identity_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--count", "1", "--size", "32", "--strength", "0", "--out", s(&out)]);
    let f: imse_core::Field = io::read_field_raw(&out.join("pair_0/true_field.raw")).unwrap();
    assert!(f.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn remap_demo_with_identity_spec_copies_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "1", "--size", "32", "--out", s(&data)]);
    let input = data.join("pair_0/target.raw");
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"control_points": [-1.0, 0.2, 1.0], "permutation": [0, 1]}"#).unwrap();
    let out = tmp.path().join("remapped.raw");
    ok(&["remap-demo", "--input", s(&input), "--spec", s(&spec), "--out", s(&out)]);
    let a: Image = io::read_image_raw(&input).unwrap();
    let b: Image = io::read_image_raw(&out).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() <= 1e-6);
    }

    let sampled = tmp.path().join("sampled.raw");
    ok(&["remap-demo", "--input", s(&input), "--seed", "5", "--n-min", "3", "--n-max", "3", "--out", s(&sampled)]);
    let resolved: serde_json::Value = io::read_json(&tmp.path().join("resolved_config.json")).unwrap();
    assert_eq!(resolved["spec"]["permutation"].as_array().unwrap().len(), 4);
}

#[test]
fn invalid_inputs_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "1", "--size", "32", "--out", s(&data)]);
    let input = data.join("pair_0/target.raw");

    let spec = tmp.path().join("bad_spec.json");
    fs::write(&spec, r#"{"control_points": [-1.0, 0.2, 1.0], "permutation": [1, 1]}"#).unwrap();
    let out = lab(&["remap-demo", "--input", s(&input), "--spec", s(&spec), "--out", s(&tmp.path().join("x.raw"))]);
    assert_eq!(out.status.code(), Some(16));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let out = lab(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = lab(&["translate", "--evaluator", s(&tmp.path().join("missing.ckpt")), "--reference", s(&input), "--source", s(&input), "--out", s(&tmp.path().join("t.raw"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_imse-lab"))
        .args(["gen-data", "--out", s(&tmp.path().join("z"))])
        .env("IMSE_LAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluator_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "3", "--size", "32", "--out", s(&data)]);
    let cfg = tiny_evaluator_config(tmp.path());
    let ev_dir = tmp.path().join("ev");
    ok(&["train-evaluator", "--config", s(&cfg), "--data", s(&data), "--seed", "2", "--out", s(&ev_dir)]);
    let trace = fs::read_to_string(ev_dir.join("loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    let resolved: serde_json::Value = io::read_json(&ev_dir.join("resolved_config.json")).unwrap();
    assert_eq!(resolved["seed"], 2);
    let ckpt = ev_dir.join("evaluator.ckpt");

    let pair = data.join("pair_0");
    let reg = tmp.path().join("reg");
    ok(&[
        "register",
        "--loss", "imse",
        "--evaluator", s(&ckpt),
        "--iters", "3",
        "--moving", s(&pair.join("moving.raw")),
        "--target", s(&pair.join("target.raw")),
        "--masks-moving", s(&pair.join("masks")),
        "--masks-target", s(&pair.join("masks")),
        "--out", s(&reg),
    ]);
    assert_eq!(fs::read_to_string(reg.join("trace.csv")).unwrap().lines().count(), 4);
    let metrics: serde_json::Value = io::read_json(&reg.join("metrics.json")).unwrap();
    let d = metrics["mean_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d));

    let eval_out = tmp.path().join("eval.json");
    ok(&[
        "evaluate",
        "--result", s(&reg),
        "--masks", s(&pair.join("masks")),
        "--evaluator", s(&ckpt),
        "--target", s(&pair.join("target.raw")),
        "--out", s(&eval_out),
    ]);
    let ev: serde_json::Value = io::read_json(&eval_out).unwrap();
    assert!((ev["mean_dice"].as_f64().unwrap() - d).abs() < 1e-12);
    assert!(ev["alignment_score"].as_f64().unwrap() <= 1.0);

    let translated = tmp.path().join("translated.raw");
    ok(&[
        "translate",
        "--evaluator", s(&ckpt),
        "--reference", s(&pair.join("target.raw")),
        "--source", s(&pair.join("moving.raw")),
        "--out", s(&translated),
    ]);
    let t: Image = io::read_image_raw(&translated).unwrap();
    assert!(t.values().iter().all(|v| (-1.0..=1.0).contains(v)));

    let corr = tmp.path().join("corr");
    ok(&["correlate", "--evaluator", s(&ckpt), "--pairs", s(&data), "--transforms", "6", "--out", s(&corr)]);
    let csv = fs::read_to_string(corr.join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(corr.join("scatter.png").exists());
}

#[test]
fn network_registration_trains_then_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "2", "--size", "32", "--out", s(&data)]);
    let cfg = tmp.path().join("reg.json");
    fs::write(&cfg, r#"{"method": "network", "network": {"base_channels": 2, "steps": 2, "batch_size": 2}}"#).unwrap();
    let pair = data.join("pair_1");
    let first = tmp.path().join("first");
    let args = |out: &Path, extra: &[&str]| {
        let mut v = vec!["register".to_string(), "--config".into(), s(&cfg).into(), "--loss".into(), "ncc".into()];
        v.extend(extra.iter().map(|e| e.to_string()));
        v.extend(["--moving".into(), s(&pair.join("moving.raw")).into(), "--target".into(), s(&pair.join("target.raw")).into(), "--out".into(), s(out).into()]);
        v
    };
    let a = args(&first, &["--train-data", s(&data)]);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let ckpt = first.join("network.ckpt");
    assert!(ckpt.exists());
    let second = tmp.path().join("second");
    let b = args(&second, &["--network", s(&ckpt)]);
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(first.join("field.raw")).unwrap(), fs::read(second.join("field.raw")).unwrap());

    let out = lab(&["register", "--method", "network", "--moving", s(&pair.join("moving.raw")), "--target", s(&pair.join("target.raw")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = tmp.path().join("suite.json");
    fs::write(
        &suite,
        r#"{"size": 32, "source_phantoms": 2, "train_pairs": 2, "test_pairs": 2, "losses": ["mae", "imse-sr"],
            "evaluator": {"channels": [2, 3, 4], "residual_blocks": 1, "steps": 2, "batch_size": 2},
            "network": {"base_channels": 2, "steps": 2, "batch_size": 2}}"#,
    )
    .unwrap();
    let out = tmp.path().join("bench");
    let stdout = ok(&["benchmark", "--suite", s(&suite), "--out", s(&out)]).stdout;
    assert!(String::from_utf8(stdout).unwrap().contains("| imse-sr |"));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("results.md").exists());
    let report: serde_json::Value = io::read_json(&out.join("report.json")).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}
