//! Dataset ingestion: CIFAR binary batches, class-per-directory image folders
//! and a procedural dataset used for smoke runs and benchmarks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::{images_to_tensor, ImageBatch};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub format: String,
    pub class_names: Vec<String>,
    pub split_counts: BTreeMap<String, usize>,
    pub image_side: usize,
}

/// Images stored as `(count, side, side, 3)` bytes with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<u8>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, h, w, c) = images.dim();
        if labels.len() != n {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if h != w || c != 3 {
            return Err(Error::Data(format!("dataset images must be square RGB, got {h}x{w}x{c}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.dim().1
    }

    /// Image `i` as `[0, 1]` floats, HWC.
    pub fn image(&self, i: usize) -> Array3<f32> {
        self.images.slice(s![i, .., .., ..]).mapv(|v| f32::from(v) / 255.0)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        ImageBatch::new(indices.iter().map(|&i| self.image(i)).collect())
    }

    /// NCHW `[0, 1]` tensor for `indices`.
    pub fn tensor(&self, indices: &[usize]) -> Array4<f32> {
        let imgs: Vec<_> = indices.iter().map(|&i| self.image(i)).collect();
        images_to_tensor(&imgs)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (_, h, w, c) = self.images.dim();
        let mut images = Array4::<u8>::zeros((indices.len(), h, w, c));
        for (k, &i) in indices.iter().enumerate() {
            images.slice_mut(s![k, .., .., ..]).assign(&self.images.slice(s![i, .., .., ..]));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Centre-resizes every image to `side` (bilinear).
    pub fn resized(&self, side: usize) -> Dataset {
        if side == self.side() {
            return self.clone();
        }
        let n = self.len();
        let mut images = Array4::<u8>::zeros((n, side, side, 3));
        for i in 0..n {
            let img = crate::pipeline::resize_bilinear(self.image(i).view(), side, side);
            images
                .slice_mut(s![i, .., .., ..])
                .assign(&img.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// A train split, an optional held-out split and their manifest.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => 3073,
            CifarKind::Cifar100 => 3074,
        }
    }

    fn label_bytes(self) -> usize {
        self.record_len() - 3072
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            CifarKind::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            CifarKind::Cifar100 => (vec!["train.bin"], "test.bin"),
        }
    }
}

const CIFAR10_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Decodes CIFAR binary records. Labels are the (fine) class label; pixels
/// are stored channel-major, row-major within each 32×32 channel.
pub fn decode_cifar(bytes: &[u8], kind: CifarKind) -> Result<Dataset> {
    let rec = kind.record_len();
    if bytes.is_empty() {
        return Err(Error::Data("CIFAR file is empty".into()));
    }
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Data(format!(
            "CIFAR file of {} bytes is truncated: not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let lb = kind.label_bytes();
    let mut images = Array4::<u8>::zeros((n, 32, 32, 3));
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        labels.push(r[lb - 1] as usize);
        let px = &r[lb..];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    images[[i, y, x, c]] = px[c * 1024 + y * 32 + x];
                }
            }
        }
    }
    Dataset::new(images, labels, kind.num_classes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Verifies files against `SHA256SUMS` (`<hex>  <file>` lines) when present.
fn verify_checksums(dir: &Path) -> Result<()> {
    let sums = dir.join("SHA256SUMS");
    if !sums.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(&sums).map_err(|e| Error::io(&sums, e))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(expect), Some(file)) = (parts.next(), parts.next()) else {
            return Err(Error::Data(format!("malformed checksum line: {line}")));
        };
        let file = file.trim_start_matches('*');
        let got = hex::encode(Sha256::digest(read(&dir.join(file))?));
        if !got.eq_ignore_ascii_case(expect) {
            return Err(Error::Data(format!("checksum mismatch for {file}: expected {expect}, got {got}")));
        }
    }
    Ok(())
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let classes = parts[0].num_classes;
    let views: Vec<_> = parts.iter().map(|d| d.images.view()).collect();
    let images = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(images, labels, classes)
}

/// Loads the canonical CIFAR binary distribution from `path` (the directory
/// holding the `.bin` files, or its parent).
pub fn load_cifar_binary(path: &Path, kind: CifarKind) -> Result<DatasetSplits> {
    let (train_files, test_file) = kind.files();
    let dir = [
        path.to_path_buf(),
        path.join("cifar-10-batches-bin"),
        path.join("cifar-100-binary"),
    ]
    .into_iter()
    .find(|d| d.join(train_files[0]).exists())
    .ok_or_else(|| Error::Data(format!("no {} found under {}", train_files[0], path.display())))?;
    verify_checksums(&dir)?;
    let train = concat(
        train_files
            .iter()
            .map(|f| decode_cifar(&read(&dir.join(f))?, kind))
            .collect::<Result<_>>()?,
    )?;
    let test_path = dir.join(test_file);
    let test = if test_path.exists() {
        Some(decode_cifar(&read(&test_path)?, kind)?)
    } else {
        None
    };
    let class_names = match kind {
        CifarKind::Cifar10 => read_names(&dir.join("batches.meta.txt"))
            .unwrap_or_else(|| CIFAR10_NAMES.iter().map(|s| s.to_string()).collect()),
        CifarKind::Cifar100 => read_names(&dir.join("fine_label_names.txt"))
            .unwrap_or_else(|| (0..100).map(|i| format!("class{i:02}")).collect()),
    };
    let mut split_counts = BTreeMap::new();
    split_counts.insert("train".to_string(), train.len());
    if let Some(t) = &test {
        split_counts.insert("test".to_string(), t.len());
    }
    Ok(DatasetSplits {
        manifest: DatasetManifest {
            name: match kind {
                CifarKind::Cifar10 => "cifar10".into(),
                CifarKind::Cifar100 => "cifar100".into(),
            },
            format: "cifar_binary".into(),
            class_names,
            split_counts,
            image_side: 32,
        },
        train,
        test,
    })
}

fn read_names(path: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(path).ok()?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    (!names.is_empty()).then_some(names)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn center_square(img: image::RgbImage, side: usize) -> Array3<u8> {
    let (w, h) = img.dimensions();
    let k = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - k) / 2, (h - k) / 2, k, k).to_image();
    let resized = image::imageops::resize(&cropped, side as u32, side as u32, image::imageops::FilterType::Triangle);
    Array3::from_shape_vec((side, side, 3), resized.into_raw()).expect("rgb buffer matches its dimensions")
}

/// Loads `path/<class>/<image>` with classes indexed in sorted name order.
/// Files that fail to decode are skipped with a warning.
pub fn load_image_folder(path: &Path, side: usize) -> Result<(Dataset, DatasetManifest)> {
    let classes: Vec<PathBuf> = sorted_entries(path)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", path.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ci, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match image::open(&file) {
                Ok(img) => {
                    images.push(center_square(img.to_rgb8(), side));
                    labels.push(ci);
                }
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
    }
    let mut arr = Array4::<u8>::zeros((images.len(), side, side, 3));
    for (i, im) in images.iter().enumerate() {
        arr.slice_mut(s![i, .., .., ..]).assign(im);
    }
    let class_names: Vec<String> = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let ds = Dataset::new(arr, labels, class_names.len())?;
    let mut split_counts = BTreeMap::new();
    split_counts.insert("all".to_string(), ds.len());
    let manifest = DatasetManifest {
        name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        format: "image_folder".into(),
        class_names,
        split_counts,
        image_side: side,
    };
    Ok((ds, manifest))
}

/// Loads `path/train` and `path/test` (or `path/val`) when present, else
/// treats `path` itself as the training split.
pub fn load_image_folder_splits(path: &Path, side: usize) -> Result<DatasetSplits> {
    let train_dir = path.join("train");
    if !train_dir.is_dir() {
        let (train, manifest) = load_image_folder(path, side)?;
        return Ok(DatasetSplits {
            train,
            test: None,
            manifest,
        });
    }
    let (train, mut manifest) = load_image_folder(&train_dir, side)?;
    manifest.split_counts.clear();
    manifest.split_counts.insert("train".into(), train.len());
    let test = match ["test", "val"].iter().map(|d| path.join(d)).find(|p| p.is_dir()) {
        Some(dir) => {
            let (t, m) = load_image_folder(&dir, side)?;
            if m.class_names != manifest.class_names {
                return Err(Error::Data("train and held-out splits have different classes".into()));
            }
            manifest.split_counts.insert("test".into(), t.len());
            Some(t)
        }
        None => None,
    };
    manifest.name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetSplits {
        train,
        test,
        manifest,
    })
}

/// Procedurally generated labelled images.
///
/// Each class owns an oriented stripe texture and a hue; each image adds its
/// own random low-frequency colour field and blob, so patches of one image
/// share statistics that patches of other images do not.
pub fn synthetic(count: usize, side: usize, classes: usize, seed: u64) -> Dataset {
    let mut images = Array4::<u8>::zeros((count, side, side, 3));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, "synthetic", &[i as u64]);
        let class = i % classes;
        labels.push(class);
        let angle = std::f64::consts::PI * class as f64 / classes as f64;
        let freq = 2.0 + (class % 3) as f64;
        let class_rgb = [
            0.5 + 0.4 * (angle * 2.0).cos(),
            0.5 + 0.4 * (angle * 2.0 + 2.1).cos(),
            0.5 + 0.4 * (angle * 2.0 + 4.2).cos(),
        ];
        let own: [f64; 3] = [r.random(), r.random(), r.random()];
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let (gx, gy): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let (bx, by, br): (f64, f64, f64) = (r.random(), r.random(), r.random_range(0.1..0.3));
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
                let t = (u * angle.cos() + v * angle.sin()) * freq * std::f64::consts::TAU + phase;
                let stripe = 0.5 + 0.5 * t.sin();
                let field = 0.5 + 0.25 * (gx * (u - 0.5) + gy * (v - 0.5));
                let blob = if (u - bx).powi(2) + (v - by).powi(2) < br * br { 1.0 } else { 0.0 };
                for c in 0..3 {
                    let val = 0.35 * stripe * class_rgb[c] + 0.35 * field * own[c] + 0.2 * blob * (1.0 - own[c])
                        + 0.1 * r.random::<f64>();
                    images[[i, y, x, c]] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Dataset::new(images, labels, classes).expect("generated dataset is well formed")
}

/// Synthetic train split of `count` images plus a disjoint test split of `count / 5`.
pub fn synthetic_splits(count: usize, side: usize, classes: usize, seed: u64) -> DatasetSplits {
    let test_count = (count / 5).max(classes);
    let all = synthetic(count + test_count, side, classes, seed);
    let train = all.subset(&(0..count).collect::<Vec<_>>());
    let test = all.subset(&(count..count + test_count).collect::<Vec<_>>());
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        format: "synthetic".into(),
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        split_counts: BTreeMap::from([("train".to_string(), count), ("test".to_string(), test_count)]),
        image_side: side,
    };
    DatasetSplits {
        train,
        test: Some(test),
        manifest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes CIFAR-10 records directly from the layout description.
    fn write_record(label: u8, pixel: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
        let mut rec = vec![label];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    rec.push(pixel(c, y, x));
                }
            }
        }
        rec
    }

    #[test]
    fn two_record_fixture_round_trips() {
        let mut bytes = write_record(7, |c, y, x| (c * 80 + y * 2 + x) as u8);
        bytes.extend(write_record(2, |_, _, _| 9));
        let ds = decode_cifar(&bytes, CifarKind::Cifar10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.images[[0, 3, 5, 0]], 11);
        assert_eq!(ds.images[[0, 3, 5, 2]], 171);
        assert_eq!(ds.images[[0, 31, 31, 1]], 80 + 62 + 31);
        assert!(ds.images.slice(s![1, .., .., ..]).iter().all(|&v| v == 9));
        assert!((ds.image(1)[[0, 0, 0]] - 9.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![3u8, 42];
        rec.extend(std::iter::repeat_n(0, 3072));
        let ds = decode_cifar(&rec, CifarKind::Cifar100).unwrap();
        assert_eq!(ds.labels, vec![42]);
    }

    #[test]
    fn empty_and_truncated_files_fail() {
        assert!(decode_cifar(&[], CifarKind::Cifar10).is_err());
        assert!(decode_cifar(&[0u8; 3072], CifarKind::Cifar10).is_err());
        assert!(decode_cifar(&[0u8; 3073], CifarKind::Cifar100).is_err());
    }

    #[test]
    fn cifar10_split_arithmetic() {
        // five training batches of 10 000 records each
        let (train, _) = CifarKind::Cifar10.files();
        assert_eq!(train.len() * 10_000, 50_000);
        assert_eq!(CifarKind::Cifar10.record_len() * 10_000, 30_730_000);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(6, 16, 3, 1);
        let b = synthetic(6, 16, 3, 1);
        assert_eq!(a.images, b.images);
        assert_eq!(a.class_counts(), vec![2, 2, 2]);
    }
}
