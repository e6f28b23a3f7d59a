//! Browser bindings for the interactive demo page in `www/`.
//!
//! Three operations are exposed: building a montage batch from procedural
//! images, visualising the decouple stage on a random feature map, and
//! evaluating the clustering loss on noisy synthetic embeddings.

use jigclu_core::data::synthetic;
use jigclu_core::losses::{cluster_loss, retrieval_accuracy, retrieval_chance, ClusterTargets};
use jigclu_core::model::{decouple, decouple_side};
use jigclu_core::nn::bilinear_matrix;
use jigclu_core::pipeline::{build_batch, AugPosition, AugPreset, InputFormat, TaskConfig};
use jigclu_core::rng;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

/// Side of the demo images; divisible by 2, 3 and 4.
pub const DEMO_SIDE: usize = 96;

fn rgba(img: &Array3<f32>) -> Vec<u8> {
    let (h, w, _) = img.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img[[y, x, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            out.push(255);
        }
    }
    out
}

fn js_err(e: jigclu_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One built montage batch with its source images and labels.
#[wasm_bindgen]
pub struct MontageView {
    side: usize,
    m: usize,
    patch: usize,
    overlap: usize,
    sources: Vec<Vec<u8>>,
    montages: Vec<Vec<u8>>,
    cluster_ids: Vec<u32>,
    location_ids: Vec<u32>,
}

impl MontageView {
    pub fn build(n: usize, m: usize, ratio: f64, seed: u64, augment: bool) -> jigclu_core::Result<Self> {
        let task = TaskConfig {
            m,
            overlap_ratio: ratio,
            input_format: InputFormat::Montage,
            aug_position: AugPosition::AfterSplit,
            augmentation: if augment { AugPreset::MocoV2 } else { AugPreset::Identity },
        };
        let grid = task.grid(DEMO_SIDE)?;
        let policy = task.policy(&grid);
        let data = synthetic(n, DEMO_SIDE, n.clamp(2, 8), seed);
        let images = data.batch(&(0..n).collect::<Vec<_>>())?;
        let built = build_batch(&images, &grid, &policy, InputFormat::Montage, &mut rng::stream(seed, "demo", &[]))?;
        let batch = built
            .into_montage()
            .ok_or_else(|| jigclu_core::Error::Invalid("expected a montage batch".into()))?;
        Ok(MontageView {
            side: DEMO_SIDE,
            m,
            patch: grid.patch,
            overlap: grid.overlap,
            sources: images.images().iter().map(rgba).collect(),
            montages: batch.montages.iter().map(rgba).collect(),
            cluster_ids: batch.cluster_ids.iter().map(|&v| v as u32).collect(),
            location_ids: batch.location_ids.iter().map(|&v| v as u32).collect(),
        })
    }
}

#[wasm_bindgen]
impl MontageView {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, m: usize, ratio: f64, seed: u32, augment: bool) -> Result<MontageView, JsError> {
        Self::build(n, m, ratio, seed.into(), augment).map_err(js_err)
    }

    pub fn count(&self) -> usize {
        self.montages.len()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn source_rgba(&self, i: usize) -> Vec<u8> {
        self.sources[i].clone()
    }

    pub fn montage_rgba(&self, i: usize) -> Vec<u8> {
        self.montages[i].clone()
    }

    /// Source image of every slot, montage-major.
    pub fn cluster_ids(&self) -> Vec<u32> {
        self.cluster_ids.clone()
    }

    /// Source grid location of every slot, montage-major.
    pub fn location_ids(&self) -> Vec<u32> {
        self.location_ids.clone()
    }
}

/// A random `h × h` single-channel feature map, its bilinear upsampling and
/// the `m × m` vector grid produced by the decouple stage.
#[wasm_bindgen]
pub struct DecoupleView {
    h: usize,
    m: usize,
    up_side: usize,
    input: Vec<f32>,
    upsampled: Vec<f32>,
    pooled: Vec<f32>,
}

impl DecoupleView {
    pub fn build(h: usize, m: usize, seed: u64) -> jigclu_core::Result<Self> {
        if h == 0 || m == 0 {
            return Err(jigclu_core::Error::Invalid("feature side and grid side must be positive".into()));
        }
        let mut r = rng::stream(seed, "decouple_demo", &[]);
        let fm = Array4::from_shape_fn((1, 1, h, h), |_| r.random::<f64>());
        let up_side = decouple_side(h, m);
        let a = bilinear_matrix(h, up_side);
        let plane = fm.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
        let up: Array2<f64> = a.dot(&plane).dot(&a.t());
        let pv = decouple(&fm, m);
        Ok(DecoupleView {
            h,
            m,
            up_side,
            input: plane.iter().map(|&v| v as f32).collect(),
            upsampled: up.iter().map(|&v| v as f32).collect(),
            pooled: pv.column(0).iter().map(|&v| v as f32).collect(),
        })
    }
}

#[wasm_bindgen]
impl DecoupleView {
    #[wasm_bindgen(constructor)]
    pub fn new(h: usize, m: usize, seed: u32) -> Result<DecoupleView, JsError> {
        Self::build(h, m, seed.into()).map_err(js_err)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn up_side(&self) -> usize {
        self.up_side
    }

    pub fn input(&self) -> Vec<f32> {
        self.input.clone()
    }

    pub fn upsampled(&self) -> Vec<f32> {
        self.upsampled.clone()
    }

    /// Row-major `m × m` slot values.
    pub fn pooled(&self) -> Vec<f32> {
        self.pooled.clone()
    }
}

/// Clustering loss and retrieval accuracy for embeddings drawn around one
/// random centre per source image with Gaussian spread `noise`.
#[wasm_bindgen]
pub struct LossView {
    pub loss: f64,
    pub retrieval: f64,
    pub chance: f64,
    /// Loss value when every embedding is identical.
    pub collapsed: f64,
}

impl LossView {
    pub fn build(n: usize, m: usize, tau: f64, noise: f64, seed: u64) -> jigclu_core::Result<Self> {
        let mm = m * m;
        let dim = 16;
        let mut r = rng::stream(seed, "loss_demo", &[]);
        let centres = Array2::from_shape_fn((n, dim), |_| r.sample::<f64, _>(StandardNormal));
        let ids: Vec<usize> = (0..n * mm).map(|k| k / mm).collect();
        let z = Array2::from_shape_fn((n * mm, dim), |(k, d)| centres[[ids[k], d]] + noise * r.sample::<f64, _>(StandardNormal));
        let targets = ClusterTargets::new(ids, mm)?;
        Ok(LossView {
            loss: cluster_loss(z.view(), &targets, tau)?,
            retrieval: retrieval_accuracy(z.view(), &targets)?,
            chance: retrieval_chance(n, m),
            collapsed: ((n * mm - 1) as f64).ln(),
        })
    }
}

#[wasm_bindgen]
impl LossView {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, m: usize, tau: f64, noise: f64, seed: u32) -> Result<LossView, JsError> {
        Self::build(n, m, tau, noise, seed.into()).map_err(js_err)
    }
}
