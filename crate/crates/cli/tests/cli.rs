use std::path::Path;
use std::process::{Command, Output};

fn jigclu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jigclu"))
        .current_dir(dir)
        .env_remove("JIGCLU_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

const SMALL: &str = r#"
[dataset]
synthetic_count = 32
image_side = 16

[model]
embed_dim = 8

[model.backbone]
kind = "toy"
width = 4
out_channels = 8
stride = 2

[optim]
epochs = 1
batch_size = 8
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

#[test]
fn inspect_batch_writes_montages_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("dump");
    let o = jigclu(tmp.path(), &["-c", &cfg, "--out-dir", out.to_str().unwrap(), "inspect-batch", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["seed"], 7);
    let files = labels["files"].as_array().unwrap();
    assert_eq!(files.len(), 8);
    for f in files {
        let img = image::open(out.join(f.as_str().unwrap())).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }
    let clusters = labels["cluster_ids"].as_array().unwrap();
    assert_eq!(clusters.len(), 8);
    assert!(clusters.iter().all(|row| row.as_array().unwrap().len() == 4));

    // same seed, same dump
    let again = tmp.path().join("again");
    jigclu(tmp.path(), &["-c", &cfg, "--out-dir", again.to_str().unwrap(), "inspect-batch", "--seed", "7"]);
    assert_eq!(std::fs::read(out.join("montage_3.png")).unwrap(), std::fs::read(again.join("montage_3.png")).unwrap());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = jigclu(tmp.path(), &["-c", &cfg, "--set", "loss.tau=-1", "show-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss.tau"));
    std::fs::write(tmp.path().join("typo.toml"), "[task]\ngrid = 3\n").unwrap();
    let o = jigclu(tmp.path(), &["-c", "typo.toml", "show-config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jigclu(
        tmp.path(),
        &["--set", "dataset.format=\"cifar10\"", "--set", "dataset.path=\"nowhere\"", "inspect-batch"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = jigclu(tmp.path(), &["-c", &cfg, "--set", "task.m=4", "show-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    std::fs::write(tmp.path().join("resolved.toml"), &text).unwrap();
    let o2 = jigclu(tmp.path(), &["-c", "resolved.toml", "show-config"]);
    assert_eq!(String::from_utf8(o2.stdout).unwrap(), text);
    assert!(text.contains("m = 4"));
}

#[test]
fn pretrain_then_linear_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let o = jigclu(tmp.path(), &["-c", &cfg, "--out-dir", run, "pretrain"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = format!("{run}/final.json");
    let o = jigclu(
        tmp.path(),
        &["-c", &cfg, "--out-dir", run, "--set", "eval.epochs=2", "linear-eval", "--checkpoint", &ck],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{run}/eval_linear.json")).unwrap()).unwrap();
    let top1 = report["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
}

#[test]
fn bench_reports_every_input_format() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("bench");
    let o = jigclu(tmp.path(), &["-c", &cfg, "--out-dir", out.to_str().unwrap(), "bench-input-format", "--steps", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("bench_input_format.md")).unwrap();
    for name in ["montage", "small_patch", "scaled_up"] {
        assert!(table.contains(name), "{table}");
    }
}
