use std::fs;
use std::path::Path;

use jigclu_core::commands;
use jigclu_core::config::ExperimentConfig;
use jigclu_core::data::{load_cifar_binary, load_image_folder, CifarKind};
use jigclu_core::model::JigsawNet;
use jigclu_core::trainer::{self, Checkpoint, Sgd};
use sha2::{Digest, Sha256};

fn pixel(image: usize, y: usize, x: usize, c: usize) -> u8 {
    ((image * 37 + y * 7 + x * 3 + c * 101) % 256) as u8
}

/// Writes CIFAR-10 style records: one label byte, then the red, green and
/// blue planes, each 32 rows of 32 bytes.
fn write_cifar_file(path: &Path, first: usize, count: usize) {
    let mut out = Vec::new();
    for i in first..first + count {
        out.push((i % 10) as u8);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    out.push(pixel(i, y, x, c));
                }
            }
        }
    }
    fs::write(path, out).unwrap();
}

fn cifar_fixture(root: &Path) -> std::path::PathBuf {
    let dir = root.join("cifar-10-batches-bin");
    fs::create_dir_all(&dir).unwrap();
    for b in 0..5 {
        write_cifar_file(&dir.join(format!("data_batch_{}.bin", b + 1)), b * 3, 3);
    }
    write_cifar_file(&dir.join("test_batch.bin"), 100, 2);
    dir
}

#[test]
fn cifar_binary_layout_decodes_to_hwc() {
    let tmp = tempfile::tempdir().unwrap();
    cifar_fixture(tmp.path());
    let splits = load_cifar_binary(tmp.path(), CifarKind::Cifar10).unwrap();
    assert_eq!(splits.train.len(), 15);
    let test = splits.test.unwrap();
    assert_eq!(test.len(), 2);
    for i in 0..15 {
        assert_eq!(splits.train.labels[i], i % 10);
        for (y, x, c) in [(0, 0, 0), (5, 17, 1), (31, 31, 2), (12, 3, 2)] {
            assert_eq!(splits.train.images[[i, y, x, c]], pixel(i, y, x, c));
        }
    }
    assert_eq!(test.images[[1, 4, 9, 1]], pixel(101, 4, 9, 1));
    assert_eq!(splits.manifest.class_names[0], "airplane");
    assert_eq!(splits.manifest.split_counts["train"], 15);
}

#[test]
fn checksum_file_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = cifar_fixture(tmp.path());
    let mut sums = String::new();
    let mut names: Vec<String> = (1..=5).map(|b| format!("data_batch_{b}.bin")).collect();
    names.push("test_batch.bin".into());
    for n in &names {
        let digest = Sha256::digest(fs::read(dir.join(n)).unwrap());
        sums.push_str(&format!("{}  {n}\n", hex::encode(digest)));
    }
    fs::write(dir.join("SHA256SUMS"), &sums).unwrap();
    assert!(load_cifar_binary(&dir, CifarKind::Cifar10).is_ok());

    write_cifar_file(&dir.join("data_batch_3.bin"), 50, 3);
    let err = load_cifar_binary(&dir, CifarKind::Cifar10).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("data_batch_3.bin"), "{err}");
}

#[test]
fn truncated_cifar_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = cifar_fixture(tmp.path());
    let path = dir.join("data_batch_2.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_cifar_binary(tmp.path(), CifarKind::Cifar10).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn image_folder_sorts_classes_and_skips_non_images() {
    let tmp = tempfile::tempdir().unwrap();
    for (class, shade) in [("zebra", 200u8), ("ant", 10u8)] {
        let dir = tmp.path().join(class);
        fs::create_dir_all(&dir).unwrap();
        for k in 0..2u8 {
            let img = image::RgbImage::from_pixel(2, 2, image::Rgb([shade + k, shade, shade]));
            img.save(dir.join(format!("img{k}.png"))).unwrap();
        }
    }
    fs::write(tmp.path().join("ant").join("README.txt"), "not an image").unwrap();
    let (ds, manifest) = load_image_folder(tmp.path(), 2).unwrap();
    assert_eq!(manifest.class_names, ["ant", "zebra"]);
    assert_eq!(ds.labels, [0, 0, 1, 1]);
    assert_eq!(ds.images[[0, 0, 0, 0]], 10);
    assert_eq!(ds.images[[1, 1, 1, 0]], 11);
    assert_eq!(ds.images[[3, 0, 1, 0]], 201);
    assert_eq!(manifest.split_counts["all"], 4);
}

fn tiny_config(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
[dataset]
synthetic_count = 16
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

[io]
out_dir = "{}"
{extra}
"#,
        out.display()
    );
    ExperimentConfig::from_toml_str(&text, &[]).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let mut model = JigsawNet::<f32>::new(&cfg.model, 2, 3);
    let mut opt = Sgd::<f32>::new(0.9, 1e-4);
    opt.step(&mut model, 0.0);
    let ck = Checkpoint::capture(&mut model, &cfg.model, Some(&opt), 5, 1, 3, "abc");
    let first = ck.save(&tmp.path().join("a"), "ck").unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    let second = loaded.save(&tmp.path().join("b"), "ck").unwrap();
    for ext in ["json", "bin"] {
        assert_eq!(
            fs::read(first.with_extension(ext)).unwrap(),
            fs::read(second.with_extension(ext)).unwrap(),
            "{ext} differs"
        );
    }
    let mut rebuilt = loaded.build_model().unwrap();
    assert_eq!(trainer::backbone_digest(&mut rebuilt), trainer::backbone_digest(&mut model));
}

#[test]
fn corrupt_checkpoint_blob_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let mut model = JigsawNet::<f32>::new(&cfg.model, 2, 0);
    let path = Checkpoint::capture(&mut model, &cfg.model, None, 0, 0, 0, "h").save(tmp.path(), "ck").unwrap();
    let bin = path.with_extension("bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes.pop();
    fs::write(&bin, bytes).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().exit_code(), 3);
}

#[test]
fn config_round_trips_through_toml() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "workers = 2");
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
    assert_eq!(again.to_toml_string(), cfg.to_toml_string());
    assert_eq!(again.hash(), cfg.hash());
    let moved = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &["io.out_dir=\"elsewhere\"".into()]).unwrap();
    assert_eq!(moved.hash(), cfg.hash());
    let changed = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &["loss.tau=0.5".into()]).unwrap();
    assert_ne!(changed.hash(), cfg.hash());
}

#[test]
fn zero_epoch_pretrain_checkpoints_the_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path(), "");
    cfg.optim.epochs = 0;
    let summary = commands::pretrain(&cfg, None).unwrap();
    assert_eq!(summary.steps, 0);
    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    let mut fresh = JigsawNet::<f32>::new(&cfg.model, cfg.task.m, cfg.optim.seed);
    let expect = Checkpoint::capture(&mut fresh, &cfg.model, None, 0, 0, cfg.optim.seed, &cfg.hash());
    assert_eq!(ck.blob, expect.blob);
    for name in ["config.toml", "dataset.json", "pretrain_summary.json", "metrics.jsonl"] {
        assert!(tmp.path().join(name).exists(), "{name} missing");
    }
}
