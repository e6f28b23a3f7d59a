//! Representation quality: frozen-feature linear probing, fine-tuning and
//! class-balanced label subsets.

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::JigsawNet;
use crate::nn::{global_avg_pool, global_avg_pool_backward, Linear};
use crate::trainer::{backbone_digest, lr_at, Sgd};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Linear,
    Finetune,
    Semi,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Linear => "linear",
            EvalMode::Finetune => "finetune",
            EvalMode::Semi => "semi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    /// Fraction of labels per class used for training (semi mode).
    #[serde(default = "default_fraction")]
    pub label_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Linear probe learning rate (cosine decay, no weight decay).
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate for fine-tuning and semi-supervised fine-tuning.
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_wd")]
    pub finetune_weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Draw smaller label subsets as prefixes of larger ones.
    #[serde(default = "yes")]
    pub nested: bool,
    /// Threads used for feature extraction.
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_mode() -> EvalMode {
    EvalMode::Linear
}
fn default_fraction() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1.0
}
fn default_finetune_lr() -> f64 {
    0.05
}
fn default_wd() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    128
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: default_mode(),
            label_fraction: default_fraction(),
            epochs: default_epochs(),
            lr: default_lr(),
            finetune_lr: default_finetune_lr(),
            finetune_weight_decay: default_wd(),
            batch_size: default_batch(),
            seed: 0,
            nested: true,
            workers: 1,
        }
    }
}

impl EvalConfig {
    /// `(key, message)` for every violated constraint.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            out.push(("eval.label_fraction".into(), "must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            out.push(("eval.batch_size".into(), "must be positive".into()));
        }
        if self.workers == 0 {
            out.push(("eval.workers".into(), "must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0 && self.finetune_weight_decay >= 0.0) {
            out.push(("eval.lr".into(), "learning rates and decay must be non-negative".into()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub top1: f64,
    /// Present when the dataset has at least 10 classes.
    pub top5: Option<f64>,
    pub per_class: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub label_fraction: f64,
    pub config_hash: String,
    pub backbone_hash: String,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        let top5 = self.top5.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "{:<9} top1 {:>6.2}  top5 {:>6}  train {:>6}  test {:>6}  config {}",
            self.mode.name(),
            100.0 * self.top1,
            top5,
            self.n_train,
            self.n_test,
            self.config_hash
        )
    }
}

/// Globally pooled backbone features (inference mode), one row per image.
/// Batches are spread over `workers` threads, each with its own model copy.
pub fn extract_features(model: &JigsawNet<f32>, data: &Dataset, batch_size: usize, workers: usize) -> Array2<f64> {
    let n = data.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size.max(1))
        .map(|a| (a, (a + batch_size).min(n)))
        .collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let mut parts: Vec<(usize, Array2<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                let mut local = model.clone();
                scope.spawn(move || {
                    chunks
                        .iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|&(a, b)| {
                            let idx: Vec<usize> = (a..b).collect();
                            (a, local.pooled_features(&data.tensor(&idx)).mapv(f64::from))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("feature worker panicked"))
            .collect()
    });
    parts.sort_by_key(|(a, _)| *a);
    let dim = model.backbone.spec().out_channels;
    let mut out = Array2::<f64>::zeros((n, dim));
    for (a, f) in parts {
        out.slice_mut(s![a..a + f.nrows(), ..]).assign(&f);
    }
    out
}

fn softmax_ce_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z: f64 = row.sum();
        loss += z.ln() - (row[y].ln());
        row.mapv_inplace(|v| v / z / n);
        row[y] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// A softmax classifier on fixed feature vectors, trained with SGD
/// (momentum 0.9, cosine learning rate, no weight decay).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: ndarray::Array1<f64>,
    scale: ndarray::Array1<f64>,
    pub head: Linear<f64>,
}

impl LinearProbe {
    pub fn train(features: &Array2<f64>, labels: &[usize], classes: usize, cfg: &EvalConfig) -> Result<Self> {
        let (n, d) = features.dim();
        if n != labels.len() || n == 0 {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside 0..{classes}")));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let var = features.var_axis(Axis(0), 0.0);
        let scale = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
        let mut probe = LinearProbe {
            mean,
            scale,
            head: Linear::zeros(d, classes),
        };
        let x = probe.standardize(features);
        let bs = cfg.batch_size.min(n);
        let steps_per_epoch = n.div_ceil(bs);
        let total = cfg.epochs * steps_per_epoch;
        let mut opt = Sgd::<f64>::new(0.9, 0.0);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, "probe", &[epoch as u64]));
            for chunk in order.chunks(bs) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let logits = probe.head.forward(&xb, true);
                let (_, g) = softmax_ce_grad(&logits, &yb);
                probe.head.weight.zero_grad();
                probe.head.bias.zero_grad();
                probe.head.backward(&g);
                let lr = lr_at(step, total, cfg.lr);
                opt.update("weight", &mut probe.head.weight, lr);
                opt.update("bias", &mut probe.head.bias, lr);
                step += 1;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &Array2<f64>) -> Array2<f64> {
        (f - &self.mean) * &self.scale
    }

    pub fn logits(&mut self, features: &Array2<f64>) -> Array2<f64> {
        let x = self.standardize(features);
        self.head.forward(&x, false)
    }
}

/// Top-1, optional top-5 and per-class top-1 accuracy of `logits`.
pub fn score(logits: &Array2<f64>, labels: &[usize], classes: usize) -> (f64, Option<f64>, Vec<f64>) {
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut per = vec![(0usize, 0usize); classes];
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        // rank of the true class; ties count against it
        let above = row.iter().filter(|&&v| v >= row[y]).count() - 1;
        per[y].1 += 1;
        if above == 0 {
            hit1 += 1;
            per[y].0 += 1;
        }
        if above < 5 {
            hit5 += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    let top5 = (classes >= 10).then(|| hit5 as f64 / n);
    let per_class = per
        .into_iter()
        .map(|(h, c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    (hit1 as f64 / n, top5, per_class)
}

fn check_labels(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes != test.num_classes {
        return Err(Error::Data(format!(
            "train split has {} classes, test split {}",
            train.num_classes, test.num_classes
        )));
    }
    Ok(())
}

/// Trains a linear probe on frozen pooled features and scores the test split.
/// Fails if the backbone (parameters and normalisation statistics) changed.
pub fn linear_eval(
    model: &mut JigsawNet<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    check_labels(train, test)?;
    let before = backbone_digest(model);
    let f_train = extract_features(model, train, cfg.batch_size, cfg.workers);
    let f_test = extract_features(model, test, cfg.batch_size, cfg.workers);
    let mut probe = LinearProbe::train(&f_train, &train.labels, train.num_classes, cfg)?;
    let after = backbone_digest(model);
    if before != after {
        return Err(Error::Invalid("backbone changed during linear evaluation".into()));
    }
    let (top1, top5, per_class) = score(&probe.logits(&f_test), &test.labels, test.num_classes);
    Ok(EvalReport {
        mode: EvalMode::Linear,
        top1,
        top5,
        per_class,
        n_train: train.len(),
        n_test: test.len(),
        label_fraction: 1.0,
        config_hash: config_hash.to_string(),
        backbone_hash: after,
    })
}

fn flip_half<R: Rng>(x: &mut Array4<f32>, rng: &mut R) {
    for mut img in x.axis_iter_mut(Axis(0)) {
        if rng.random::<f64>() < 0.5 {
            img.invert_axis(Axis(2));
        }
    }
}

/// Trains the backbone and a fresh linear classifier jointly (SGD, momentum
/// 0.9, cosine schedule, random horizontal flips) and scores the test split.
pub fn finetune(
    model: &mut JigsawNet<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    check_labels(train, test)?;
    let classes = train.num_classes;
    let dim = model.backbone.spec().out_channels;
    let mut head = Linear::<f32>::new(dim, classes, &mut rng::stream(cfg.seed, "finetune_head", &[]));
    let n = train.len();
    let bs = cfg.batch_size.min(n).max(1);
    let steps_per_epoch = n / bs;
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = Sgd::<f32>::new(0.9, cfg.finetune_weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "finetune", &[epoch as u64]));
        for (b, chunk) in order.chunks_exact(bs).enumerate() {
            let mut x = train.tensor(chunk);
            flip_half(&mut x, &mut rng::stream(cfg.seed, "finetune_flip", &[epoch as u64, b as u64]));
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let fm = model.features(&x, true);
            let (h, w) = (fm.dim().2, fm.dim().3);
            let pooled = global_avg_pool(&fm);
            let logits = head.forward(&pooled, true);
            let (loss, g) = softmax_ce_grad(&logits.mapv(f64::from), &y);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    batch_seed: rng::stream_tag(cfg.seed, "finetune", &[epoch as u64, b as u64]),
                });
            }
            model.zero_grad();
            head.weight.zero_grad();
            head.bias.zero_grad();
            let dpool = head.backward(&g.mapv(|v| v as f32));
            model.backbone.backward(&global_avg_pool_backward(&dpool, h, w));
            let lr = lr_at(step, total, cfg.finetune_lr);
            model.visit_backbone_params(&mut |name, p| opt.update(name, p, lr));
            opt.update("head.weight", &mut head.weight, lr);
            opt.update("head.bias", &mut head.bias, lr);
            step += 1;
        }
    }
    let feats = extract_features(model, test, cfg.batch_size, cfg.workers);
    let logits = head.forward(&feats.mapv(|v| v as f32), false).mapv(f64::from);
    let (top1, top5, per_class) = score(&logits, &test.labels, classes);
    Ok(EvalReport {
        mode: EvalMode::Finetune,
        top1,
        top5,
        per_class,
        n_train: n,
        n_test: test.len(),
        label_fraction: 1.0,
        config_hash: config_hash.to_string(),
        backbone_hash: backbone_digest(model),
    })
}

/// Class-balanced label subset: exactly `⌊fraction · count_c⌋` indices of
/// every class `c`, chosen by a seeded shuffle. In nested mode the shuffle
/// does not depend on `fraction`, so smaller subsets are prefixes of larger.
pub fn semi_split(data: &Dataset, fraction: f64, seed: u64, nested: bool) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            return Err(Error::Invalid(format!(
                "fraction {fraction} leaves class {c} ({} images) without labels",
                members.len()
            )));
        }
        let key = if nested {
            vec![c as u64]
        } else {
            vec![c as u64, fraction.to_bits()]
        };
        members.shuffle(&mut rng::stream(seed, "semi", &key));
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tunes on a class-balanced label subset of `train`.
pub fn semi_finetune(
    model: &mut JigsawNet<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    let idx = semi_split(train, cfg.label_fraction, cfg.seed, cfg.nested)?;
    let labelled = train.subset(&idx);
    let mut report = finetune(model, &labelled, test, cfg, config_hash)?;
    report.mode = EvalMode::Semi;
    report.label_fraction = cfg.label_fraction;
    Ok(report)
}

/// Runs the protocol selected by `cfg.mode`.
pub fn evaluate(
    model: &mut JigsawNet<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    match cfg.mode {
        EvalMode::Linear => linear_eval(model, train, test, cfg, config_hash),
        EvalMode::Finetune => finetune(model, train, test, cfg, config_hash),
        EvalMode::Semi => semi_finetune(model, train, test, cfg, config_hash),
    }
}
