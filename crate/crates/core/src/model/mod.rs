//! Backbone, decouple stage and the clustering / location heads.
//!
//! Output rows are ordered montage-major then slot row-major: row `i` belongs
//! to montage `i / (m·m)`, slot `i % (m·m)`, the same order the pipeline uses
//! for its labels.

mod backbone;

pub use backbone::{Backbone, BackboneConfig, BackboneSpec, ConvStack, ResNet, StageConfig};

use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::nn::{
    avg_pool_matrix, bilinear_matrix, cast_matrix, global_avg_pool, BufferVisitor, Linear, Param, ParamVisitor, Real, Relu,
};
use crate::rng;

/// `(n, ĉ, h, w)` backbone output.
pub type FeatureMap<T> = Array4<T>;
/// `(n·m·m, ĉ)` decoupled per-slot vectors.
pub type PatchVectors<T> = Array2<T>;
/// `(n·m·m, c)` clustering embeddings.
pub type Embeddings<T> = Array2<T>;
/// `(n·m·m, m·m)` location logits.
pub type LocationLogits<T> = Array2<T>;

/// Side the decouple stage resamples an `h`-sided map to: the smallest
/// multiple of `m` that is at least `h`.
pub fn decouple_side(h: usize, m: usize) -> usize {
    h.div_ceil(m) * m
}

/// `(m, h)` matrix combining bilinear enlargement to [`decouple_side`] with
/// average pooling down to `m` cells.
pub fn decouple_matrix(h: usize, m: usize) -> Array2<f64> {
    let side = decouple_side(h, m);
    let up = bilinear_matrix(h, side);
    avg_pool_matrix(side, side / m).dot(&up)
}

/// Splits every feature map into `m × m` cell vectors.
///
/// Maps whose side is not a multiple of `m` are first enlarged by bilinear
/// interpolation (never shrunk), then average-pooled with kernel = stride =
/// `side / m`.
pub fn decouple<T: Real>(fm: &FeatureMap<T>, m: usize) -> PatchVectors<T> {
    let (n, c, h, w) = fm.dim();
    assert_eq!(h, w, "decouple expects square feature maps");
    let b: Array2<T> = cast_matrix(&decouple_matrix(h, m));
    let mm = m * m;
    let mut out = Array2::<T>::zeros((n * mm, c));
    for img in 0..n {
        for ch in 0..c {
            let plane = fm.slice(ndarray::s![img, ch, .., ..]);
            let cells = b.dot(&plane).dot(&b.t());
            for r in 0..m {
                for col in 0..m {
                    out[[img * mm + r * m + col, ch]] = cells[[r, col]];
                }
            }
        }
    }
    out
}

/// Gradient of [`decouple`] with respect to its input map of side `h`.
pub fn decouple_backward<T: Real>(grad: &PatchVectors<T>, h: usize, m: usize) -> FeatureMap<T> {
    let mm = m * m;
    let (rows, c) = grad.dim();
    let n = rows / mm;
    let b: Array2<T> = cast_matrix(&decouple_matrix(h, m));
    let mut out = Array4::<T>::zeros((n, c, h, h));
    let mut cells = Array2::<T>::zeros((m, m));
    for img in 0..n {
        for ch in 0..c {
            for r in 0..m {
                for col in 0..m {
                    cells[[r, col]] = grad[[img * mm + r * m + col, ch]];
                }
            }
            let g = b.t().dot(&cells).dot(&b);
            out.slice_mut(ndarray::s![img, ch, .., ..]).assign(&g);
        }
    }
    out
}

/// Two-layer MLP `ĉ → ĉ → c` with a ReLU in between.
#[derive(Debug, Clone)]
pub struct MlpHead<T> {
    pub fc0: Linear<T>,
    relu: Relu,
    pub fc1: Linear<T>,
}

impl<T: Real> MlpHead<T> {
    pub fn new<R: rand::Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        MlpHead {
            fc0: Linear::new(in_dim, in_dim, rng),
            relu: Relu::default(),
            fc1: Linear::new(in_dim, out_dim, rng),
        }
    }

    pub fn forward(&mut self, pv: &PatchVectors<T>, keep: bool) -> Embeddings<T> {
        let h = self.fc0.forward(pv, keep);
        let h = self.relu.forward(&h, keep);
        self.fc1.forward(&h, keep)
    }

    pub fn backward(&mut self, grad: &Embeddings<T>) -> PatchVectors<T> {
        let g = self.fc1.backward(grad);
        let g = self.relu.backward(&g);
        self.fc0.backward(&g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.fc0.visit_params(&format!("{prefix}.0"), f);
        self.fc1.visit_params(&format!("{prefix}.1"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Per-channel standardisation applied to `[0, 1]` inputs.
    #[serde(default = "default_mean")]
    pub mean: [f64; 3],
    #[serde(default = "default_std")]
    pub std: [f64; 3],
}

fn default_embed_dim() -> usize {
    128
}
fn default_mean() -> [f64; 3] {
    [0.4914, 0.4822, 0.4465]
}
fn default_std() -> [f64; 3] {
    [0.2470, 0.2435, 0.2616]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            embed_dim: default_embed_dim(),
            mean: default_mean(),
            std: default_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.backbone.validate()?;
        if self.embed_dim == 0 {
            return Err(crate::Error::Config("model.embed_dim must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(crate::Error::Config("model.std entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput<T> {
    pub embeddings: Embeddings<T>,
    pub logits: LocationLogits<T>,
}

/// The full pretext network: standardisation, backbone, decouple and both heads.
pub struct JigsawNet<T: Real> {
    pub backbone: Box<dyn Backbone<T>>,
    pub mlp: MlpHead<T>,
    pub loc: Linear<T>,
    pub m: usize,
    mean: [f64; 3],
    std: [f64; 3],
    pass: Option<(usize, usize)>,
}

impl<T: Real> Clone for JigsawNet<T> {
    fn clone(&self) -> Self {
        JigsawNet {
            backbone: self.backbone.boxed_clone(),
            mlp: self.mlp.clone(),
            loc: self.loc.clone(),
            m: self.m,
            mean: self.mean,
            std: self.std,
            pass: None,
        }
    }
}

impl<T: Real> JigsawNet<T> {
    /// Builds and initialises a network for `m × m` grids from the `init` stream of `seed`.
    pub fn new(cfg: &ModelConfig, m: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init", &[]);
        let backbone = cfg.backbone.build::<T, _>(&mut r);
        Self::with_backbone(backbone, cfg, m, &mut r)
    }

    pub fn with_backbone<R: rand::Rng>(backbone: Box<dyn Backbone<T>>, cfg: &ModelConfig, m: usize, rng: &mut R) -> Self {
        let c_hat = backbone.spec().out_channels;
        JigsawNet {
            mlp: MlpHead::new(c_hat, cfg.embed_dim, rng),
            loc: Linear::new(c_hat, m * m, rng),
            backbone,
            m,
            mean: cfg.mean,
            std: cfg.std,
            pass: None,
        }
    }

    pub fn standardize(&self, x: &Array4<T>) -> Array4<T> {
        let mut out = x.clone();
        for (ch, mut plane) in out.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let (mu, sd) = (T::of(self.mean[ch]), T::of(self.std[ch]));
            plane.mapv_inplace(|v| (v - mu) / sd);
        }
        out
    }

    /// Backbone feature map for `[0, 1]` NCHW images.
    pub fn features(&mut self, x: &Array4<T>, train: bool) -> FeatureMap<T> {
        let x = self.standardize(x);
        self.backbone.forward(&x, train)
    }

    /// Globally pooled backbone features, inference mode.
    pub fn pooled_features(&mut self, x: &Array4<T>) -> Array2<T> {
        global_avg_pool(&self.features(x, false))
    }

    /// Forward pass for input images each holding `slots_per_side²` patches
    /// (the grid `m` for montages, 1 for separate patch images).
    pub fn forward(&mut self, x: &Array4<T>, slots_per_side: usize, train: bool) -> NetOutput<T> {
        let fm = self.features(x, train);
        let h = fm.dim().2;
        let pv = decouple(&fm, slots_per_side);
        self.pass = train.then_some((h, slots_per_side));
        NetOutput {
            embeddings: self.mlp.forward(&pv, train),
            logits: self.loc.forward(&pv, train),
        }
    }

    /// Backward pass from head gradients; accumulates into every parameter.
    pub fn backward(&mut self, d_embeddings: &Embeddings<T>, d_logits: &LocationLogits<T>) {
        let (h, m) = self.pass.take().expect("backward without a training forward");
        let mut dpv = self.mlp.backward(d_embeddings);
        dpv += &self.loc.backward(d_logits);
        let dfm = decouple_backward(&dpv, h, m);
        self.backbone.backward(&dfm);
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.backbone.visit_params("backbone", f);
        self.mlp.visit_params("mlp", f);
        self.loc.visit_params("loc", f);
    }

    pub fn visit_backbone_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.backbone.visit_params("backbone", f);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<'_, T>) {
        self.backbone.visit_buffers("backbone", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param<T>| p.zero_grad());
    }

    /// Every named tensor (parameters then buffers) in a stable order.
    pub fn named_tensors(&mut self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, p| out.push((n.to_string(), p.value.clone())));
        self.visit_buffers(&mut |n, b| out.push((n.to_string(), b.clone())));
        out
    }

    pub fn cached_bytes(&self) -> usize {
        self.backbone.cached_bytes() + self.mlp.fc0.cached_bytes() + self.mlp.fc1.cached_bytes() + self.loc.cached_bytes()
    }
}
