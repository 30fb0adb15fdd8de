use std::path::Path;
use std::process::{Command, Output};

fn tsccn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsccn")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_and_flags_exit_with_usage() {
    let out = tsccn(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = tsccn(&["generate", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tsccn(&["train", "--out", "x", "--manifest", "m.csv", "--ablation", "triple"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_is_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsccn(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("missing.safetensors")),
        "--manifest",
        s(&dir.path().join("missing.csv")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn generate_train_eval_visualize_repair() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth.toml");
    std::fs::write(
        &synth,
        "n_patients = 5\nslices_per_patient = 2\nvertebrae_per_slice = 6\nimage_size = 16\n",
    )
    .unwrap();
    let data = root.join("data");
    let out = tsccn(&["generate", "--config", s(&synth), "--out", s(&data), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.csv", "train.csv", "val.csv", "test.csv", "resolved_config.toml"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let resolved = std::fs::read_to_string(data.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 4"));
    let regenerated = root.join("again");
    let out = tsccn(&["generate", "--config", s(&data.join("resolved_config.toml")), "--out", s(&regenerated)]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(data.join("manifest.csv")).unwrap(),
        std::fs::read(regenerated.join("manifest.csv")).unwrap()
    );

    let cfg = root.join("train.toml");
    std::fs::write(
        &cfg,
        "epochs = 1\nbatch_size = 8\nsteps_per_epoch = 2\n[network]\nimage_size = 16\nbase_width = 2\nstem_kernel = 3\nstem_stride = 1\n",
    )
    .unwrap();
    let run = root.join("run");
    let out = tsccn(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&data.join("train.csv")),
        "--val-manifest",
        s(&data.join("val.csv")),
        "--out",
        s(&run),
        "--ablation",
        "full_tsccn",
        "--paper-literal-weight-loss",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("paper_literal_weight_loss = true"));
    assert!(run.join("best.safetensors").is_file() && run.join("loss_curve.csv").is_file());

    let ev = root.join("eval");
    let out = tsccn(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.safetensors")),
        "--manifest",
        s(&data.join("test.csv")),
        "--out",
        s(&ev),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["macro"].is_object());
    assert!(ev.join("metrics.json").is_file());

    let vis = root.join("vis");
    let out = tsccn(&[
        "visualize",
        "--checkpoint",
        s(&run.join("best.safetensors")),
        "--manifest",
        s(&data.join("test.csv")),
        "--out",
        s(&vis),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(vis.join("embedding.png").is_file() && vis.join("cams").is_dir());

    let rep = root.join("repaired");
    std::fs::write(root.join("repair.toml"), "patch_size = 16\n[repair]\ngap_factor = 1.6\n").unwrap();
    let out = tsccn(&[
        "repair-masks",
        "--config",
        s(&root.join("repair.toml")),
        "--masks",
        s(&data.join("masks")),
        "--out",
        s(&rep),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("repair_log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 10);
    assert!(rep.join("crops").is_dir());
}
