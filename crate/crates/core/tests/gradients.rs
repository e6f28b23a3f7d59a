//! End-to-end gradient checks: analytic parameter gradients of the whole
//! network (backbone, decouple, both heads, both losses) against central
//! finite differences in f64.

use jigclu_core::losses::{total_loss, total_loss_grad, ClusterTargets, LocationTargets, LossConfig};
use jigclu_core::model::{BackboneConfig, JigsawNet, ModelConfig, StageConfig};
use jigclu_core::rng;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

struct Case {
    model: JigsawNet<f64>,
    x: Array4<f64>,
    m: usize,
    clusters: ClusterTargets,
    locations: LocationTargets,
    loss: LossConfig,
}

impl Case {
    fn new(backbone: BackboneConfig, n: usize, m: usize, side: usize, seed: u64) -> Self {
        let cfg = ModelConfig {
            backbone,
            embed_dim: 5,
            ..ModelConfig::default()
        };
        let model = JigsawNet::<f64>::new(&cfg, m, seed);
        let mut r = rng::stream(seed, "grad_case", &[]);
        let x = Array4::from_shape_fn((n, 3, side, side), |_| r.random::<f64>());
        let mm = m * m;
        let mut slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..mm).map(move |p| (i, p))).collect();
        slots.shuffle(&mut r);
        let (c, l): (Vec<usize>, Vec<usize>) = slots.into_iter().unzip();
        Case {
            model,
            x,
            m,
            clusters: ClusterTargets::new(c, mm).unwrap(),
            locations: LocationTargets::new(l, mm).unwrap(),
            loss: LossConfig {
                tau: 0.5,
                ..LossConfig::default()
            },
        }
    }

    fn loss_value(&mut self) -> f64 {
        let out = self.model.forward(&self.x, self.m, true);
        total_loss(out.embeddings.view(), out.logits.view(), &self.clusters, &self.locations, &self.loss)
            .unwrap()
            .total
    }

    /// Largest relative error over a sample of parameter entries.
    fn check(&mut self, per_tensor: usize, seed: u64, eps: f64) -> f64 {
        let out = self.model.forward(&self.x, self.m, true);
        let g = total_loss_grad(out.embeddings.view(), out.logits.view(), &self.clusters, &self.locations, &self.loss).unwrap();
        self.model.zero_grad();
        let d_emb = g.embeddings.unwrap_or_else(|| Array2::zeros(out.embeddings.raw_dim()));
        let d_log = g.logits.unwrap_or_else(|| Array2::zeros(out.logits.raw_dim()));
        self.model.backward(&d_emb, &d_log);
        let mut picks: Vec<(String, usize, f64)> = Vec::new();
        let mut r = rng::stream(seed, "grad_pick", &[]);
        self.model.visit_params(&mut |name, p| {
            for _ in 0..per_tensor.min(p.value.len()) {
                let k = r.random_range(0..p.value.len());
                picks.push((name.to_string(), k, p.grad.as_slice().unwrap()[k]));
            }
        });
        let mut worst: f64 = 0.0;
        for (name, k, analytic) in picks {
            let nudge = |model: &mut JigsawNet<f64>, delta: f64| {
                model.visit_params(&mut |n, p| {
                    if n == name {
                        p.value.as_slice_mut().unwrap()[k] += delta;
                    }
                });
            };
            nudge(&mut self.model, eps);
            let hi = self.loss_value();
            nudge(&mut self.model, -2.0 * eps);
            let lo = self.loss_value();
            nudge(&mut self.model, eps);
            let numeric = (hi - lo) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }
}

#[test]
fn toy_backbone_through_exact_decouple() {
    let toy = BackboneConfig::Toy {
        width: 4,
        out_channels: 6,
        stride: 2,
    };
    let err = Case::new(toy, 2, 2, 8, 1).check(6, 1, 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn toy_backbone_through_interpolating_decouple() {
    // 9x9 input, stride 2 -> 5x5 map, resampled to 6x6 for m = 3
    let toy = BackboneConfig::Toy {
        width: 3,
        out_channels: 5,
        stride: 2,
    };
    let err = Case::new(toy, 2, 3, 9, 2).check(6, 2, 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn residual_backbone_in_training_mode() {
    let resnet = BackboneConfig::Resnet {
        stem_width: 4,
        stem_stride: 1,
        stages: vec![
            StageConfig {
                width: 4,
                stride: 1,
                blocks: 1,
            },
            StageConfig {
                width: 6,
                stride: 2,
                blocks: 1,
            },
        ],
    };
    // batch-normalised pre-activations crowd around zero, so a step of 1e-4
    // regularly crosses a ReLU kink; a smaller step keeps the check local
    let err = Case::new(resnet, 3, 2, 8, 3).check(4, 3, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn single_branch_gradients_ignore_the_other_head() {
    let toy = BackboneConfig::Toy {
        width: 3,
        out_channels: 4,
        stride: 1,
    };
    let mut case = Case::new(toy, 2, 2, 6, 4);
    case.loss.location_enabled = false;
    let out = case.model.forward(&case.x, 2, true);
    let g = total_loss_grad(out.embeddings.view(), out.logits.view(), &case.clusters, &case.locations, &case.loss).unwrap();
    assert!(g.logits.is_none());
    case.model.zero_grad();
    case.model.backward(g.embeddings.as_ref().unwrap(), &Array2::zeros(out.logits.raw_dim()));
    let mut loc_grad = 0.0;
    case.model.visit_params(&mut |n, p| {
        if n.starts_with("loc.") {
            loc_grad += p.grad.iter().map(|v| v.abs()).sum::<f64>();
        }
    });
    assert_eq!(loc_grad, 0.0);
    assert!(case.check(4, 4, 1e-4) < 1e-4);
}
