//! Pretext training: SGD with momentum and weight decay under a per-step
//! cosine schedule, deterministic data loading, checkpointing and resume.
//!
//! All randomness after initialisation is keyed by `(seed, epoch, batch)`:
//! the epoch shuffle uses stream `("shuffle", epoch)` and batch `b` of that
//! epoch is built from stream `("batch", epoch, b)`. A checkpoint taken at an
//! epoch boundary therefore pins the rest of the trajectory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::losses::{self, ClusterTargets, LocationTargets, LossConfig};
use crate::model::{JigsawNet, ModelConfig};
use crate::nn::{Param, Real};
use crate::pipeline::{build_batch, BuiltBatch, TaskConfig};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    /// Batch-building threads.
    pub workers: usize,
    /// Batches each worker may build ahead of the optimiser.
    pub queue_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            log_interval: 10,
            checkpoint_interval: 10,
            workers: 1,
            queue_capacity: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("optim.batch_size must be at least 2".into()));
        }
        if !(self.lr0 >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.lr0, momentum and weight_decay must be non-negative".into()));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 || self.workers == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("io intervals, workers and queue capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total_steps`, evaluated per step.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`. Frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, p: &mut Param<T>, lr: f64) {
        if p.frozen {
            return;
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
        ndarray::Zip::from(&mut *v)
            .and(&mut p.value)
            .and(&p.grad)
            .for_each(|v, w, &g| {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            });
    }

    pub fn step(&mut self, model: &mut JigsawNet<T>, lr: f64) {
        model.visit_params(&mut |name, p| self.update(name, p, lr));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_clu: f64,
    pub l_loc: f64,
    pub total: f64,
    pub retrieval_acc: f64,
    pub loc_acc: f64,
}

/// One JSON line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_clu: f64,
    pub l_loc: f64,
    pub total: f64,
    pub retrieval_acc: f64,
    pub loc_acc: f64,
    pub lr: f64,
    pub config_hash: String,
}

/// Forward pass and losses without any update.
pub fn evaluate_batch<T: Real>(model: &mut JigsawNet<T>, batch: &BuiltBatch, loss_cfg: &LossConfig) -> Result<StepMetrics> {
    let (x, spp) = batch.network_input();
    let out = model.forward(&x.mapv(|v| T::of(f64::from(v))), spp, false);
    let (metrics, _) = losses_for(&out.embeddings, &out.logits, batch, loss_cfg)?;
    Ok(metrics)
}

fn losses_for<T: Real>(
    emb: &Array2<T>,
    logits: &Array2<T>,
    batch: &BuiltBatch,
    loss_cfg: &LossConfig,
) -> Result<(StepMetrics, losses::LossGrads)> {
    let mm = batch.m() * batch.m();
    let clusters = ClusterTargets::new(batch.cluster_ids().to_vec(), mm)?;
    let locations = LocationTargets::new(batch.location_ids().to_vec(), mm)?;
    let z = emb.mapv(Real::f64);
    let l = logits.mapv(Real::f64);
    let grads = losses::total_loss_grad(z.view(), l.view(), &clusters, &locations, loss_cfg)?;
    let metrics = StepMetrics {
        l_clu: grads.breakdown.clustering,
        l_loc: grads.breakdown.location,
        total: grads.breakdown.total,
        retrieval_acc: losses::retrieval_accuracy(z.view(), &clusters)?,
        loc_acc: losses::location_accuracy(l.view(), &locations)?,
    };
    Ok((metrics, grads))
}

/// One optimisation step on `batch` at learning rate `lr`.
///
/// Returns [`Error::NonFinite`] (with placeholder batch identity, filled in
/// by the caller) without touching the parameters when the loss is not finite.
pub fn train_step<T: Real>(
    model: &mut JigsawNet<T>,
    batch: &BuiltBatch,
    loss_cfg: &LossConfig,
    opt: &mut Sgd<T>,
    lr: f64,
) -> Result<StepMetrics> {
    let (x, spp) = batch.network_input();
    let out = model.forward(&x.mapv(|v| T::of(f64::from(v))), spp, true);
    let (metrics, grads) = losses_for(&out.embeddings, &out.logits, batch, loss_cfg)?;
    if !metrics.total.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            batch_seed: String::new(),
        });
    }
    let d_emb = grads
        .embeddings
        .map_or_else(|| Array2::zeros(out.embeddings.raw_dim()), |g| g.mapv(T::of));
    let d_log = grads
        .logits
        .map_or_else(|| Array2::zeros(out.logits.raw_dim()), |g| g.mapv(T::of));
    model.zero_grad();
    model.backward(&d_emb, &d_log);
    opt.step(model, lr);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

/// Where the data stream continues after a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
    pub next_batch: usize,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub m: usize,
    pub model: ModelConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest plus one little-endian `f32` blob. Model tensors are named
/// `backbone.*`, `mlp.*` and `loc.*`; momentum buffers `optim.<param>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn capture(
        model: &mut JigsawNet<f32>,
        model_cfg: &ModelConfig,
        opt: Option<&Sgd<f32>>,
        step: usize,
        epoch: usize,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        let mut named = model.named_tensors();
        if let Some(opt) = opt {
            for (name, v) in &opt.velocity {
                named.push((format!("optim.{name}"), v.clone()));
            }
        }
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            let offset = blob.len();
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                nbytes: blob.len() - offset,
            });
        }
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                step,
                epoch,
                config_hash: config_hash.to_string(),
                m: model.m,
                model: model_cfg.clone(),
                rng: RngState {
                    seed,
                    next_epoch: epoch,
                    next_batch: 0,
                },
                tensors,
            },
            blob,
        }
    }

    fn tensor(&self, entry: &TensorEntry) -> ArrayD<f32> {
        let bytes = &self.blob[entry.offset..entry.offset + entry.nbytes];
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), vals).expect("validated entry")
    }

    /// Checks that the tensor table tiles the blob exactly.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                self.manifest.format_version
            )));
        }
        let mut cursor = 0;
        for e in &self.manifest.tensors {
            let expect = e.shape.iter().product::<usize>() * 4;
            if e.offset != cursor || e.nbytes != expect {
                return Err(Error::Data(format!("checkpoint tensor {} has inconsistent offset or size", e.name)));
            }
            cursor += e.nbytes;
        }
        if cursor != self.blob.len() {
            return Err(Error::Data(format!(
                "checkpoint blob is {} bytes but the table covers {cursor}",
                self.blob.len()
            )));
        }
        Ok(())
    }

    /// Builds the model described by the manifest and loads its tensors.
    pub fn build_model(&self) -> Result<JigsawNet<f32>> {
        let mut model = JigsawNet::<f32>::new(&self.manifest.model, self.manifest.m, 0);
        self.restore(&mut model, None)?;
        Ok(model)
    }

    /// Loads model tensors (and momentum buffers when `opt` is given).
    pub fn restore(&self, model: &mut JigsawNet<f32>, opt: Option<&mut Sgd<f32>>) -> Result<()> {
        self.validate()?;
        let table: BTreeMap<&str, &TensorEntry> = self.manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut missing = None;
        let mut load = |name: &str, dst: &mut ArrayD<f32>| match table.get(name) {
            Some(e) if e.shape == dst.shape() => *dst = self.tensor(e),
            _ => missing = Some(name.to_string()),
        };
        model.visit_params(&mut |n, p| load(n, &mut p.value));
        model.visit_buffers(&mut |n, b| load(n, b));
        if let Some(name) = missing {
            return Err(Error::Data(format!("checkpoint lacks a tensor matching {name}")));
        }
        if let Some(opt) = opt {
            opt.velocity = self
                .manifest
                .tensors
                .iter()
                .filter_map(|e| e.name.strip_prefix("optim.").map(|n| (n.to_string(), self.tensor(e))))
                .collect();
        }
        Ok(())
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        v.push(b'\n');
        v
    }

    /// SHA-256 of manifest and blob.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest_bytes());
        h.update(&self.blob);
        hex::encode(h.finalize())
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, &self.blob).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.manifest_bytes()).map_err(|e| Error::io(&json, e))?;
        Ok(json)
    }

    /// Loads a checkpoint from its manifest path (the blob sits next to it).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        let bin = manifest_path.with_extension("bin");
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let ck = Checkpoint { manifest, blob };
        ck.validate()?;
        Ok(ck)
    }
}

/// Hash of a model's backbone parameters and buffers.
pub fn backbone_digest<T: Real>(model: &mut JigsawNet<T>) -> String {
    let mut h = Sha256::new();
    let mut feed = |name: &str, t: &ArrayD<T>| {
        if name.starts_with("backbone.") {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.f64().to_le_bytes());
            }
        }
    };
    model.visit_params(&mut |n, p| feed(n, &p.value));
    model.visit_buffers(&mut |n, b| feed(n, b));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config_hash: String,
    /// Metrics log and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub checkpoints_written: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
    order
}

struct MetricsSink {
    path: Option<PathBuf>,
    file: Option<fs::File>,
}

impl MetricsSink {
    fn open(out_dir: Option<&Path>, keep_until_step: Option<usize>) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(MetricsSink { path: None, file: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        // on resume keep only records up to the checkpoint step
        let kept: String = match (keep_until_step, fs::read_to_string(&path)) {
            (Some(limit), Ok(text)) => text
                .lines()
                .filter(|l| serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.step <= limit))
                .map(|l| format!("{l}\n"))
                .collect(),
            _ => String::new(),
        };
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsSink {
            path: Some(path),
            file: Some(file),
        })
    }

    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        if let (Some(f), Some(p)) = (self.file.as_mut(), self.path.as_ref()) {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Runs pretext training from initialisation (or from `opts.resume`).
pub fn train_loop(
    dataset: &Dataset,
    model: &mut JigsawNet<f32>,
    model_cfg: &ModelConfig,
    task: &TaskConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let grid = task.grid(dataset.side())?;
    let policy = task.policy(&grid);
    policy.validate()?;
    let steps_per_epoch = dataset.len() / cfg.batch_size;
    if steps_per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Config(format!(
            "dataset of {} images is smaller than one batch of {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let (mut step, start_epoch) = match &opts.resume {
        Some(ck) => {
            ck.restore(model, Some(&mut opt))?;
            (ck.manifest.step, ck.manifest.rng.next_epoch)
        }
        None => (0, 0),
    };
    let mut sink = MetricsSink::open(opts.out_dir.as_deref(), opts.resume.as_ref().map(|c| c.manifest.step))?;
    let mut metrics = Vec::new();
    let mut written = Vec::new();
    let mut last_durable: Option<PathBuf> = None;

    let end_epoch = opts.stop_after_epochs.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    for epoch in start_epoch..end_epoch {
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        let build = |b: usize| -> Result<BuiltBatch> {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images = dataset.batch(idx)?;
            let mut r = rng::stream(cfg.seed, "batch", &[epoch as u64, b as u64]);
            build_batch(&images, &grid, &policy, task.input_format, &mut r)
        };
        let outcome = std::thread::scope(|scope| -> Result<()> {
            let workers = cfg.workers.min(steps_per_epoch.max(1));
            let mut receivers = Vec::with_capacity(workers);
            for w in 0..workers {
                let (tx, rx) = mpsc::sync_channel::<Result<BuiltBatch>>(cfg.queue_capacity);
                receivers.push(rx);
                let build = &build;
                scope.spawn(move || {
                    for b in (w..steps_per_epoch).step_by(workers) {
                        if tx.send(build(b)).is_err() {
                            break;
                        }
                    }
                });
            }
            for b in 0..steps_per_epoch {
                let batch = receivers[b % workers]
                    .recv()
                    .map_err(|_| Error::Data("batch loader stopped early".into()))??;
                let lr = lr_at(step, total_steps, cfg.lr0);
                let m = match train_step(model, &batch, loss_cfg, &mut opt, lr) {
                    Ok(m) => m,
                    // a collapsed embedding leaves the loss undefined, same as a NaN
                    Err(cause @ (Error::NonFinite { .. } | Error::ZeroNorm { .. })) => {
                        let err = Error::NonFinite {
                            epoch,
                            batch: b,
                            batch_seed: rng::stream_tag(cfg.seed, "batch", &[epoch as u64, b as u64]),
                        };
                        if let Some(dir) = &opts.out_dir {
                            let diag = serde_json::json!({
                                "error": err.to_string(),
                                "cause": cause.to_string(),
                                "seed": cfg.seed,
                                "epoch": epoch,
                                "batch": b,
                                "step": step,
                                "config_hash": opts.config_hash,
                            });
                            let _ = fs::write(dir.join("abort.json"), format!("{diag:#}\n"));
                        }
                        return Err(err);
                    }
                    Err(e) => return Err(e),
                };
                step += 1;
                if step % cfg.log_interval == 0 || step == total_steps {
                    let rec = MetricRecord {
                        step,
                        epoch,
                        l_clu: m.l_clu,
                        l_loc: m.l_loc,
                        total: m.total,
                        retrieval_acc: m.retrieval_acc,
                        loc_acc: m.loc_acc,
                        lr,
                        config_hash: opts.config_hash.clone(),
                    };
                    log::info!(
                        "epoch {epoch} step {step}: total {:.4} (clu {:.4}, loc {:.4}) ret {:.3} loc {:.3} lr {lr:.5}",
                        m.total,
                        m.l_clu,
                        m.l_loc,
                        m.retrieval_acc,
                        m.loc_acc
                    );
                    sink.write(&rec)?;
                    metrics.push(rec);
                }
            }
            drop(receivers);
            Ok(())
        });
        outcome?;
        let done = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            if done % cfg.checkpoint_interval == 0 || done == cfg.epochs {
                let ck = Checkpoint::capture(model, model_cfg, Some(&opt), step, done, cfg.seed, &opts.config_hash);
                let path = ck.save(dir, &format!("ckpt_epoch{done:04}")).inspect_err(|_e| {
                    log::error!(
                        "checkpoint write failed; last durable checkpoint: {}",
                        last_durable.as_ref().map_or("none".into(), |p| p.display().to_string())
                    );
                })?;
                last_durable = Some(path.clone());
                written.push(path);
            }
        }
    }

    let done_epochs = end_epoch.max(start_epoch);
    let checkpoint = Checkpoint::capture(model, model_cfg, Some(&opt), step, done_epochs, cfg.seed, &opts.config_hash);
    if let (Some(dir), true) = (&opts.out_dir, done_epochs == cfg.epochs) {
        let path = checkpoint.save(dir, "final")?;
        written.push(path);
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        checkpoints_written: written,
    })
}
