//! Command implementations behind the `jigclu` binary. Every artifact is
//! written below the configured output directory and carries the config hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, DatasetSplits};
use crate::evaluation::{self, EvalMode, EvalReport};
use crate::losses::LossConfig;
use crate::model::JigsawNet;
use crate::pipeline::{build_batch, AugPosition, BuiltBatch, InputFormat};
use crate::trainer::{self, Checkpoint, Sgd, TrainOptions};
use crate::{rng, Error, Result};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads the configured dataset, resized so the grid tiles the image side.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    let splits = cfg.dataset.load(cfg.optim.seed)?;
    if splits.train.len() < cfg.optim.batch_size {
        return Err(Error::Data(format!(
            "train split has {} images, fewer than one batch of {}",
            splits.train.len(),
            cfg.optim.batch_size
        )));
    }
    Ok(splits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub steps: usize,
    pub config_hash: String,
    pub final_metrics: Option<trainer::MetricRecord>,
}

/// Pretext training. Writes the resolved config, dataset manifest, metrics
/// log and checkpoints into `io.out_dir`; with zero epochs the final
/// checkpoint holds the initial weights.
pub fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PretrainSummary> {
    cfg.validate()?;
    let out = cfg.io.out_dir.clone();
    let splits = load_dataset(cfg)?;
    ensure_dir(&out)?;
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(out.join("config.toml"), e))?;
    write_json(&out.join("dataset.json"), &splits.manifest)?;
    let resume = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.manifest.config_hash != hash {
                log::warn!(
                    "resuming from a checkpoint with config hash {} (current {hash})",
                    ck.manifest.config_hash
                );
            }
            Some(ck)
        }
        None => None,
    };
    let mut model = JigsawNet::<f32>::new(&cfg.model, cfg.task.m, cfg.optim.seed);
    let outcome = trainer::train_loop(
        &splits.train,
        &mut model,
        &cfg.model,
        &cfg.task,
        &cfg.loss,
        &cfg.train_config(),
        TrainOptions {
            config_hash: hash.clone(),
            out_dir: Some(out.clone()),
            resume,
            stop_after_epochs: None,
        },
    )?;
    let checkpoint = outcome
        .checkpoints_written
        .last()
        .cloned()
        .unwrap_or_else(|| out.join("final.json"));
    let summary = PretrainSummary {
        checkpoint,
        checkpoint_digest: outcome.checkpoint.digest(),
        steps: outcome.checkpoint.manifest.step,
        config_hash: hash,
        final_metrics: outcome.metrics.last().cloned(),
    };
    write_json(&out.join("pretrain_summary.json"), &summary)?;
    Ok(summary)
}

/// Builds the model to evaluate: from a checkpoint, or freshly initialised.
pub fn model_for_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<JigsawNet<f32>> {
    match checkpoint {
        Some(p) => Checkpoint::load(p)?.build_model(),
        None => Ok(JigsawNet::new(&cfg.model, cfg.task.m, cfg.optim.seed)),
    }
}

/// Runs one evaluation protocol and writes `eval_<mode>.json`.
pub fn evaluate(cfg: &ExperimentConfig, mode: EvalMode, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let splits = cfg.dataset.load(cfg.optim.seed)?;
    let test = splits
        .test
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no held-out split".into()))?;
    let mut model = model_for_eval(cfg, checkpoint)?;
    let eval_cfg = evaluation::EvalConfig {
        mode,
        ..cfg.eval.clone()
    };
    let report = evaluation::evaluate(&mut model, &splits.train, test, &eval_cfg, &cfg.hash())?;
    ensure_dir(&cfg.io.out_dir)?;
    write_json(&cfg.io.out_dir.join(format!("eval_{}.json", mode.name())), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDump {
    pub batch_seed: String,
    pub seed: u64,
    pub input_format: InputFormat,
    pub m: usize,
    pub side: usize,
    pub patch: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
    pub slot: usize,
    pub image_indices: Vec<usize>,
    pub source_labels: Vec<usize>,
    pub permutation: Vec<usize>,
    /// Per montage (or per patch image for patch formats).
    pub cluster_ids: Vec<Vec<usize>>,
    pub location_ids: Vec<Vec<usize>>,
    pub digest: Option<String>,
    pub files: Vec<String>,
    pub config_hash: String,
}

/// Converts an HWC `[0, 1]` image to 8-bit RGB.
pub fn to_rgb8(img: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// The first training batch of `seed` (epoch 0, batch 0), exactly as the
/// trainer would build it.
pub fn first_batch(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(Vec<usize>, BuiltBatch)> {
    let grid = cfg.task.grid(data.side())?;
    let policy = cfg.task.policy(&grid);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[0]));
    let idx = order[..cfg.optim.batch_size.min(data.len())].to_vec();
    let images = data.batch(&idx)?;
    let built = build_batch(&images, &grid, &policy, cfg.task.input_format, &mut rng::stream(seed, "batch", &[0, 0]))?;
    Ok((idx, built))
}

/// Writes the first batch of `seed` as PNG files plus `labels.json`.
pub fn inspect_batch(cfg: &ExperimentConfig, seed: u64) -> Result<BatchDump> {
    cfg.validate()?;
    let splits = load_dataset(cfg)?;
    let data = &splits.train;
    let grid = cfg.task.grid(data.side())?;
    let (idx, built) = first_batch(cfg, data, seed)?;
    let out = &cfg.io.out_dir;
    ensure_dir(out)?;
    let (images, digest, group, prefix) = match &built {
        BuiltBatch::Montage(b) => (&b.montages, Some(b.digest()), grid.slots(), "montage"),
        BuiltBatch::Patches(b) => (&b.images, None, 1, "patch"),
    };
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = format!("{prefix}_{i}.png");
        to_rgb8(img).save(out.join(&name))?;
        files.push(name);
    }
    let rows = |ids: &[usize]| ids.chunks(group).map(<[usize]>::to_vec).collect::<Vec<_>>();
    let perm = match &built {
        BuiltBatch::Montage(b) => b.permutation.as_slice().to_vec(),
        BuiltBatch::Patches(b) => b.permutation.as_slice().to_vec(),
    };
    let dump = BatchDump {
        batch_seed: rng::stream_tag(seed, "batch", &[0, 0]),
        seed,
        input_format: cfg.task.input_format,
        m: grid.m,
        side: grid.side,
        patch: grid.patch,
        overlap: grid.overlap,
        starts: grid.starts.clone(),
        slot: grid.slot,
        source_labels: idx.iter().map(|&i| data.labels[i]).collect(),
        image_indices: idx,
        permutation: perm,
        cluster_ids: rows(built.cluster_ids()),
        location_ids: rows(built.location_ids()),
        digest,
        files,
        config_hash: cfg.hash(),
    };
    write_json(&out.join("labels.json"), &dump)?;
    Ok(dump)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub input_format: InputFormat,
    pub sec_per_step: f64,
    /// Images of the network input tensor.
    pub network_images: usize,
    pub input_pixels: usize,
    /// Activation bytes held for backward after the forward pass, plus the input tensor.
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: usize,
    pub batch_size: usize,
    pub m: usize,
    pub rows: Vec<BenchRow>,
    pub config_hash: String,
}

impl BenchReport {
    pub fn row(&self, f: InputFormat) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.input_format == f)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("| input format | sec/step | network images | input pixels | peak bytes |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s += &format!(
                "| {} | {:.4} | {} | {} | {} |\n",
                r.input_format.name(),
                r.sec_per_step,
                r.network_images,
                r.input_pixels,
                r.peak_bytes
            );
        }
        s
    }
}

/// Times `steps` optimisation steps (after one warm-up step) for each input
/// format on identical image batches. Batch construction is excluded.
pub fn bench_input_format(cfg: &ExperimentConfig, data: &Dataset, steps: usize) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for format in InputFormat::ALL {
        let mut task = cfg.task.clone();
        task.input_format = format;
        let grid = task.grid(data.side())?;
        let policy = task.policy(&grid);
        let mut model = JigsawNet::<f32>::new(&cfg.model, task.m, cfg.optim.seed);
        let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
        let batches = (0..=steps)
            .map(|s| {
                let idx: Vec<usize> = (0..cfg.optim.batch_size).map(|k| (s * cfg.optim.batch_size + k) % data.len()).collect();
                let images = data.batch(&idx)?;
                build_batch(&images, &grid, &policy, format, &mut rng::stream(cfg.optim.seed, "bench", &[s as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        trainer::train_step(&mut model, &batches[0], &cfg.loss, &mut opt, 0.0)?;
        let t0 = Instant::now();
        for b in &batches[1..] {
            trainer::train_step(&mut model, b, &cfg.loss, &mut opt, 0.0)?;
        }
        let sec = t0.elapsed().as_secs_f64() / steps.max(1) as f64;
        let (x, spp) = batches[0].network_input();
        model.forward(&x, spp, true);
        let peak = model.cached_bytes() + x.len() * std::mem::size_of::<f32>();
        rows.push(BenchRow {
            input_format: format,
            sec_per_step: sec,
            network_images: x.dim().0,
            input_pixels: batches[0].pixel_count(),
            peak_bytes: peak,
        });
    }
    let report = BenchReport {
        steps,
        batch_size: cfg.optim.batch_size,
        m: cfg.task.m,
        rows,
        config_hash: cfg.hash(),
    };
    Ok(report)
}

/// [`bench_input_format`] on the configured dataset, writing `bench_input_format.{json,md}`.
pub fn bench_command(cfg: &ExperimentConfig, steps: usize) -> Result<BenchReport> {
    let splits = load_dataset(cfg)?;
    let report = bench_input_format(cfg, &splits.train, steps)?;
    ensure_dir(&cfg.io.out_dir)?;
    write_json(&cfg.io.out_dir.join("bench_input_format.json"), &report)?;
    fs::write(cfg.io.out_dir.join("bench_input_format.md"), report.table())
        .map_err(|e| Error::io(cfg.io.out_dir.join("bench_input_format.md"), e))?;
    Ok(report)
}

/// One factor of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFactor {
    GridSize,
    OverlapRatio,
    AugPosition,
    Branches,
}

impl AblationFactor {
    pub const ALL: [AblationFactor; 4] = [
        AblationFactor::GridSize,
        AblationFactor::OverlapRatio,
        AblationFactor::AugPosition,
        AblationFactor::Branches,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFactor::GridSize => "grid_size",
            AblationFactor::OverlapRatio => "overlap_ratio",
            AblationFactor::AugPosition => "aug_position",
            AblationFactor::Branches => "branches",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation factor `{s}`")))
    }
}

pub const OVERLAP_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// One-factor-at-a-time variants around the base config: `(label, config)`.
pub fn ablation_variants(base: &ExperimentConfig, factors: &[AblationFactor]) -> Vec<(AblationFactor, String, ExperimentConfig)> {
    let mut out = Vec::new();
    for &f in factors {
        match f {
            AblationFactor::GridSize => {
                for m in [2, 3, 4] {
                    let mut c = base.clone();
                    c.task.m = m;
                    c.dataset.image_side = base.dataset.image_side.next_multiple_of(m);
                    out.push((f, format!("m={m}"), c));
                }
            }
            AblationFactor::OverlapRatio => {
                for r in OVERLAP_GRID {
                    let mut c = base.clone();
                    c.task.overlap_ratio = r;
                    out.push((f, format!("ratio={r}"), c));
                }
            }
            AblationFactor::AugPosition => {
                for p in AugPosition::ALL {
                    let mut c = base.clone();
                    c.task.aug_position = p;
                    out.push((f, p.name().to_string(), c));
                }
            }
            AblationFactor::Branches => {
                for (label, clu, loc) in [("joint", true, true), ("clustering_only", true, false), ("location_only", false, true)] {
                    let mut c = base.clone();
                    c.loss = LossConfig {
                        clustering_enabled: clu,
                        location_enabled: loc,
                        ..base.loss.clone()
                    };
                    out.push((f, label.to_string(), c));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub factor: String,
    pub variant: String,
    pub config_hash: String,
    pub l_clu: Option<f64>,
    pub l_loc: Option<f64>,
    pub retrieval_acc: Option<f64>,
    pub loc_acc: Option<f64>,
    pub linear_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config_hash: String,
    pub random_init_top1: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "random-init linear top-1: {:.2}\n\n| factor | variant | L_clu | L_loc | retrieval | location | linear top-1 | config |\n|---|---|---|---|---|---|---|---|\n",
            100.0 * self.random_init_top1
        );
        let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        for r in &self.rows {
            s += &format!(
                "| {} | {} | {} | {} | {} | {} | {:.2} | {} |\n",
                r.factor,
                r.variant,
                f(r.l_clu),
                f(r.l_loc),
                f(r.retrieval_acc),
                f(r.loc_acc),
                100.0 * r.linear_top1,
                r.config_hash
            );
        }
        s
    }
}

/// Pretrains and linearly evaluates every variant; each run lives in
/// `io.out_dir/ablate/<factor>/<variant>`. Writes `ablation.{json,md}`.
pub fn ablate(base: &ExperimentConfig, factors: &[AblationFactor]) -> Result<AblationReport> {
    base.validate()?;
    let root = base.io.out_dir.join("ablate");
    ensure_dir(&root)?;
    let mut baseline = base.clone();
    baseline.io.out_dir = root.join("random_init");
    let random_init_top1 = evaluate(&baseline, EvalMode::Linear, None)?.top1;
    let mut rows = Vec::new();
    for (factor, label, mut cfg) in ablation_variants(base, factors) {
        cfg.io.out_dir = root.join(factor.name()).join(label.replace(['=', '.'], "_"));
        log::info!("ablation {} / {label}", factor.name());
        let summary = pretrain(&cfg, None)?;
        let report = evaluate(&cfg, EvalMode::Linear, Some(&summary.checkpoint))?;
        let m = summary.final_metrics;
        rows.push(AblationRow {
            factor: factor.name().into(),
            variant: label,
            config_hash: cfg.hash(),
            l_clu: m.as_ref().filter(|_| cfg.loss.clustering_enabled).map(|m| m.l_clu),
            l_loc: m.as_ref().filter(|_| cfg.loss.location_enabled).map(|m| m.l_loc),
            retrieval_acc: m.as_ref().map(|m| m.retrieval_acc),
            loc_acc: m.as_ref().map(|m| m.loc_acc),
            linear_top1: report.top1,
        });
    }
    let report = AblationReport {
        base_config_hash: base.hash(),
        random_init_top1,
        rows,
    };
    write_json(&base.io.out_dir.join("ablation.json"), &report)?;
    fs::write(base.io.out_dir.join("ablation.md"), report.table())
        .map_err(|e| Error::io(base.io.out_dir.join("ablation.md"), e))?;
    Ok(report)
}
