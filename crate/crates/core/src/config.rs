//! Experiment configuration: one TOML file plus `--set key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, CifarKind, DatasetSplits};
use crate::evaluation::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pipeline::TaskConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Environment variable that overrides `io.out_dir`.
pub const OUT_DIR_ENV: &str = "JIGCLU_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Cifar10,
    Cifar100,
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    #[serde(default = "default_side")]
    pub image_side: usize,
    /// Image count and class count of the procedural dataset (train split;
    /// the test split has a fifth as many images).
    #[serde(default = "default_synthetic_count")]
    pub synthetic_count: usize,
    #[serde(default = "default_synthetic_classes")]
    pub synthetic_classes: usize,
}

fn default_dataset_name() -> String {
    "synthetic".into()
}
fn default_format() -> DatasetFormat {
    DatasetFormat::Synthetic
}
fn default_side() -> usize {
    32
}
fn default_synthetic_count() -> usize {
    512
}
fn default_synthetic_classes() -> usize {
    4
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: default_dataset_name(),
            path: None,
            format: default_format(),
            image_side: default_side(),
            synthetic_count: default_synthetic_count(),
            synthetic_classes: default_synthetic_classes(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<DatasetSplits> {
        let need_path = || {
            self.path
                .as_deref()
                .ok_or_else(|| Error::Config("dataset.path is required for this format".into()))
        };
        let splits = match self.format {
            DatasetFormat::Cifar10 => data::load_cifar_binary(need_path()?, CifarKind::Cifar10)?,
            DatasetFormat::Cifar100 => data::load_cifar_binary(need_path()?, CifarKind::Cifar100)?,
            DatasetFormat::ImageFolder => data::load_image_folder_splits(need_path()?, self.image_side)?,
            DatasetFormat::Synthetic => data::synthetic_splits(
                self.synthetic_count,
                self.image_side,
                self.synthetic_classes,
                seed,
            ),
        };
        if splits.train.side() != self.image_side {
            return Ok(DatasetSplits {
                train: splits.train.resized(self.image_side),
                test: splits.test.map(|t| t.resized(self.image_side)),
                manifest: data::DatasetManifest {
                    image_side: self.image_side,
                    ..splits.manifest
                },
            });
        }
        Ok(splits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr0() -> f64 {
    0.03
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    128
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: default_lr0(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(default = "default_ckpt_interval")]
    pub checkpoint_interval: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_log_interval() -> usize {
    10
}
fn default_ckpt_interval() -> usize {
    10
}
fn default_workers() -> usize {
    1
}
fn default_queue() -> usize {
    2
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: default_out_dir(),
            log_interval: default_log_interval(),
            checkpoint_interval: default_ckpt_interval(),
            workers: default_workers(),
            queue_capacity: default_queue(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub io: IoConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// A validation failure pointing at the offending key (and its line when
/// the key appears in the source file).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(locate_toml_error(text, &e)))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(issue) = cfg.issues().into_iter().next() {
            let line = issue.key.rsplit('.').next().and_then(|k| find_key_line(text, &issue.key, k));
            return Err(Error::Config(ConfigIssue { line, ..issue }.to_string()));
        }
        Ok(cfg)
    }

    /// Loads a config file; `None` starts from defaults. `JIGCLU_OUT_DIR`
    /// replaces `io.out_dir` when set.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.io.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Every violated constraint, in a fixed order.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |key: &str, message: String| {
            out.push(ConfigIssue {
                key: key.to_string(),
                line: None,
                message,
            })
        };
        let d = &self.dataset;
        if d.image_side == 0 {
            push("dataset.image_side", "must be positive".into());
        }
        if d.format == DatasetFormat::Synthetic && (d.synthetic_classes < 2 || d.synthetic_count < d.synthetic_classes) {
            push(
                "dataset.synthetic_count",
                "synthetic data needs at least 2 classes and one image per class".into(),
            );
        }
        let t = &self.task;
        if t.m < 2 {
            push("task.m", format!("grid side must be at least 2, got {}", t.m));
        }
        if !(0.0..1.0).contains(&t.overlap_ratio) {
            push("task.overlap_ratio", format!("must lie in [0, 1), got {}", t.overlap_ratio));
        }
        if t.m >= 2 && d.image_side > 0 {
            if let Err(e) = t.grid(d.image_side) {
                push("task.m", e.to_string());
            }
        }
        let l = &self.loss;
        if !(l.tau > 0.0) {
            push("loss.tau", format!("must be positive, got {}", l.tau));
        }
        if !(l.alpha >= 0.0 && l.beta >= 0.0) {
            push("loss.alpha", "loss weights must be non-negative".into());
        }
        if !l.clustering_enabled && !l.location_enabled {
            push("loss.clustering_enabled", "at least one branch must be enabled".into());
        }
        if let Err(e) = self.model.validate() {
            push("model.backbone", e.to_string());
        }
        let o = &self.optim;
        if o.batch_size < 2 {
            push("optim.batch_size", format!("must be at least 2, got {}", o.batch_size));
        }
        if !(o.lr0 >= 0.0) {
            push("optim.lr0", "must be non-negative".into());
        }
        if !(o.momentum >= 0.0 && o.momentum < 1.0) {
            push("optim.momentum", "must lie in [0, 1)".into());
        }
        if !(o.weight_decay >= 0.0) {
            push("optim.weight_decay", "must be non-negative".into());
        }
        let io = &self.io;
        for (key, v) in [
            ("io.log_interval", io.log_interval),
            ("io.checkpoint_interval", io.checkpoint_interval),
            ("io.workers", io.workers),
            ("io.queue_capacity", io.queue_capacity),
        ] {
            if v == 0 {
                push(key, "must be positive".into());
            }
        }
        for (key, msg) in self.eval.issues() {
            push(&key, msg);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            Some(issue) => Err(Error::Config(issue.to_string())),
            None => Ok(()),
        }
    }

    /// SHA-256 (first 16 hex digits) of the canonical JSON form with
    /// `io.out_dir` removed, so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(io) = v.get_mut("io").and_then(|io| io.as_object_mut()) {
            io.remove("out_dir");
        }
        let canonical = serde_json::to_string(&v).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            lr0: self.optim.lr0,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            seed: self.optim.seed,
            log_interval: self.io.log_interval,
            checkpoint_interval: self.io.checkpoint_interval,
            workers: self.io.workers,
            queue_capacity: self.io.queue_capacity,
        }
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value and taken as a bare string when that fails.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn locate_toml_error(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

/// Line (1-based) on which `leaf` is assigned inside the table named by the
/// prefix of `dotted`.
fn find_key_line(text: &str, dotted: &str, leaf: &str) -> Option<usize> {
    let section = dotted.rsplit_once('.').map(|(s, _)| s).unwrap_or("");
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let Some((k, _)) = t.split_once('=') else { continue };
        let k = k.trim();
        let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
        if full == dotted || (current == section && k == leaf) {
            return Some(i + 1);
        }
    }
    None
}
