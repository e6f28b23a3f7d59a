use ndarray::{Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm2d, BufferVisitor, Conv2d, ParamVisitor, Real, Relu};

/// Static description of a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub out_channels: usize,
    pub stride: usize,
    /// `(name, shape)` of every trainable tensor, in visiting order.
    pub manifest: Vec<(String, Vec<usize>)>,
}

impl BackboneSpec {
    /// Spatial side of the feature map for an input of side `side`.
    pub fn output_side(&self, side: usize) -> usize {
        side.div_ceil(self.stride)
    }
}

/// A feature extractor mapping `(n, 3, L, L)` to `(n, ĉ, ⌈L/stride⌉, ⌈L/stride⌉)`.
pub trait Backbone<T: Real>: Send {
    fn spec(&self) -> &BackboneSpec;

    /// `train` selects batch statistics for normalisation layers and keeps
    /// the activations needed by [`Backbone::backward`].
    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Array4<T>) -> Array4<T>;

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>);

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut BufferVisitor<'_, T>) {}

    /// Bytes retained for the backward pass after the last forward.
    fn cached_bytes(&self) -> usize;

    fn boxed_clone(&self) -> Box<dyn Backbone<T>>;
}

fn manifest_of<T: Real>(b: &mut dyn Backbone<T>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    b.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.shape().to_vec())));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub stride: usize,
    #[serde(default = "one_block")]
    pub blocks: usize,
}

fn one_block() -> usize {
    1
}

/// Backbone selection. `Resnet` is the reference residual network; `Toy` is a
/// two-convolution stack without normalisation used for gradient checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    Resnet {
        stem_width: usize,
        stem_stride: usize,
        stages: Vec<StageConfig>,
    },
    Toy {
        width: usize,
        out_channels: usize,
        stride: usize,
    },
}

impl Default for BackboneConfig {
    /// Desk-scale residual network for 32×32 inputs: output stride 4, 64 channels.
    fn default() -> Self {
        BackboneConfig::Resnet {
            stem_width: 16,
            stem_stride: 1,
            stages: vec![
                StageConfig { width: 16, stride: 1, blocks: 1 },
                StageConfig { width: 32, stride: 2, blocks: 1 },
                StageConfig { width: 64, stride: 2, blocks: 1 },
            ],
        }
    }
}

impl BackboneConfig {
    pub fn build<T: Real, R: Rng>(&self, rng: &mut R) -> Box<dyn Backbone<T>> {
        match self {
            BackboneConfig::Resnet {
                stem_width,
                stem_stride,
                stages,
            } => Box::new(ResNet::new(*stem_width, *stem_stride, stages, rng)),
            BackboneConfig::Toy {
                width,
                out_channels,
                stride,
            } => Box::new(ConvStack::new(*width, *out_channels, *stride, rng)),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |msg: &str| Err(crate::Error::Config(format!("model.backbone: {msg}")));
        match self {
            BackboneConfig::Resnet {
                stem_width,
                stem_stride,
                stages,
            } => {
                if *stem_width == 0 || !matches!(stem_stride, 1 | 2) {
                    return bad("stem width must be positive and stem stride 1 or 2");
                }
                if stages.is_empty() {
                    return bad("at least one stage is required");
                }
                if stages.iter().any(|s| s.width == 0 || s.blocks == 0 || !matches!(s.stride, 1 | 2)) {
                    return bad("stages need positive width and blocks and stride 1 or 2");
                }
                Ok(())
            }
            BackboneConfig::Toy {
                width,
                out_channels,
                stride,
            } => {
                if *width == 0 || *out_channels == 0 || !matches!(stride, 1 | 2) {
                    return bad("toy backbone needs positive widths and stride 1 or 2");
                }
                Ok(())
            }
        }
    }
}

/// conv → BN → ReLU.
#[derive(Clone)]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBn<T> {
    fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.conv.forward(x, train);
        self.bn.forward(&h, train, train)
    }

    fn backward(&mut self, g: &Array4<T>) -> Array4<T> {
        let g = self.bn.backward(g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }

    fn cached_bytes(&self) -> usize {
        self.conv.cached_bytes() + self.bn.cached_bytes()
    }
}

/// Basic residual block: two 3×3 conv-BN layers plus an identity or 1×1 projection shortcut.
#[derive(Clone)]
struct BasicBlock<T> {
    a: ConvBn<T>,
    relu_a: Relu,
    b: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
    relu_out: Relu,
}

impl<T: Real> BasicBlock<T> {
    fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        BasicBlock {
            a: ConvBn::new(cin, cout, 3, stride, rng),
            relu_a: Relu::default(),
            b: ConvBn::new(cout, cout, 3, 1, rng),
            shortcut: (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng)),
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.a.forward(x, train);
        let h = self.relu_a.forward(&h, train);
        let mut h = self.b.forward(&h, train);
        match self.shortcut.as_mut() {
            Some(sc) => h += &sc.forward(x, train),
            None => h += x,
        }
        self.relu_out.forward(&h, train)
    }

    fn backward(&mut self, g: &Array4<T>) -> Array4<T> {
        let g = self.relu_out.backward(g);
        let gh = self.b.backward(&g);
        let gh = self.relu_a.backward(&gh);
        let mut dx = self.a.backward(&gh);
        match self.shortcut.as_mut() {
            Some(sc) => dx += &sc.backward(&g),
            None => dx += &g,
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.a.visit_params(&format!("{prefix}.a"), f);
        self.b.visit_params(&format!("{prefix}.b"), f);
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_params(&format!("{prefix}.shortcut"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.a.visit_buffers(&format!("{prefix}.a"), f);
        self.b.visit_buffers(&format!("{prefix}.b"), f);
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_buffers(&format!("{prefix}.shortcut"), f);
        }
    }

    fn cached_bytes(&self) -> usize {
        self.a.cached_bytes()
            + self.b.cached_bytes()
            + self.shortcut.as_ref().map_or(0, ConvBn::cached_bytes)
            + self.relu_a.cached_bytes()
            + self.relu_out.cached_bytes()
    }
}

/// Small residual network: a 3×3 stem followed by stages of basic blocks.
#[derive(Clone)]
pub struct ResNet<T> {
    spec: BackboneSpec,
    stem: ConvBn<T>,
    stem_relu: Relu,
    blocks: Vec<(String, BasicBlock<T>)>,
}

impl<T: Real> ResNet<T> {
    pub fn new<R: Rng>(stem_width: usize, stem_stride: usize, stages: &[StageConfig], rng: &mut R) -> Self {
        let stem = ConvBn::new(3, stem_width, 3, stem_stride, rng);
        let mut blocks = Vec::new();
        let mut cin = stem_width;
        let mut stride = stem_stride;
        for (si, st) in stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let s = if bi == 0 { st.stride } else { 1 };
                blocks.push((format!("stage{si}.block{bi}"), BasicBlock::new(cin, st.width, s, rng)));
                cin = st.width;
            }
            stride *= st.stride;
        }
        let mut net = ResNet {
            spec: BackboneSpec {
                name: "resnet".into(),
                out_channels: cin,
                stride,
                manifest: Vec::new(),
            },
            stem,
            stem_relu: Relu::default(),
            blocks,
        };
        net.spec.manifest = manifest_of(&mut net);
        net
    }
}

impl<T: Real> Backbone<T> for ResNet<T> {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.stem.forward(x, train);
        let mut h = self.stem_relu.forward(&h, train);
        for (_, b) in &mut self.blocks {
            h = b.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mut g = grad.clone();
        for (_, b) in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self.stem_relu.backward(&g);
        self.stem.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.stem.visit_params(&p("stem"), f);
        for (name, b) in &mut self.blocks {
            b.visit_params(&p(name), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.stem.visit_buffers(&p("stem"), f);
        for (name, b) in &mut self.blocks {
            b.visit_buffers(&p(name), f);
        }
    }

    fn cached_bytes(&self) -> usize {
        self.stem.cached_bytes()
            + self.stem_relu.cached_bytes()
            + self.blocks.iter().map(|(_, b)| b.cached_bytes()).sum::<usize>()
    }

    fn boxed_clone(&self) -> Box<dyn Backbone<T>> {
        Box::new(self.clone())
    }
}

/// conv3×3 → ReLU → conv3×3 (with biases, no normalisation).
#[derive(Clone)]
pub struct ConvStack<T> {
    spec: BackboneSpec,
    first: Conv2d<T>,
    relu: Relu,
    last: Conv2d<T>,
}

impl<T: Real> ConvStack<T> {
    pub fn new<R: Rng>(width: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let mut net = ConvStack {
            spec: BackboneSpec {
                name: "toy".into(),
                out_channels,
                stride,
                manifest: Vec::new(),
            },
            first: Conv2d::new(3, width, 3, stride, 1, true, rng),
            relu: Relu::default(),
            last: Conv2d::new(width, out_channels, 3, 1, 1, true, rng),
        };
        net.spec.manifest = manifest_of(&mut net);
        net
    }

    /// Zeroes the final convolution's weights, so the output map equals its bias everywhere.
    pub fn zero_final_layer(&mut self) {
        self.last.weight.value.fill(T::zero());
    }

    pub fn final_bias_mut(&mut self) -> &mut ArrayD<T> {
        &mut self.last.bias.as_mut().expect("toy convs carry a bias").value
    }
}

impl<T: Real> Backbone<T> for ConvStack<T> {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.first.forward(x, train);
        let h = self.relu.forward(&h, train);
        self.last.forward(&h, train)
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let g = self.last.backward(grad);
        let g = self.relu.backward(&g);
        self.first.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.first.visit_params(&p("conv0"), f);
        self.last.visit_params(&p("conv1"), f);
    }

    fn cached_bytes(&self) -> usize {
        self.first.cached_bytes() + self.relu.cached_bytes() + self.last.cached_bytes()
    }

    fn boxed_clone(&self) -> Box<dyn Backbone<T>> {
        Box::new(self.clone())
    }
}
