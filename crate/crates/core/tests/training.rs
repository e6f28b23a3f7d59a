use jigclu_core::config::ExperimentConfig;
use jigclu_core::data::{synthetic, synthetic_splits};
use jigclu_core::evaluation::{linear_eval, semi_split, EvalConfig};
use jigclu_core::model::JigsawNet;
use jigclu_core::trainer::{self, TrainOptions};
use jigclu_core::{commands, Error};

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(extra, &[]).unwrap()
}

/// 50 optimisation steps on the procedural data must lower the objective for
/// every seed.
#[test]
fn objective_decreases_over_fifty_steps() {
    let cfg = config(
        r#"
[optim]
batch_size = 16
epochs = 13
lr0 = 0.03
[io]
log_interval = 1
"#,
    );
    let data = synthetic(64, 32, 4, 11);
    for seed in 0..3u64 {
        let mut train = cfg.train_config();
        train.seed = seed;
        let mut model = JigsawNet::<f32>::new(&cfg.model, cfg.task.m, seed);
        let out = trainer::train_loop(&data, &mut model, &cfg.model, &cfg.task, &cfg.loss, &train, TrainOptions::default()).unwrap();
        let totals: Vec<f64> = out.metrics.iter().map(|r| r.total).collect();
        assert!(totals.len() >= 50, "{} steps", totals.len());
        let head = totals[..8].iter().sum::<f64>() / 8.0;
        let tail = totals[totals.len() - 8..].iter().sum::<f64>() / 8.0;
        assert!(tail < head, "seed {seed}: {head:.4} -> {tail:.4}");
        assert!(totals.iter().all(|t| t.is_finite()));
    }
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(
        r#"
[dataset]
synthetic_count = 32
image_side = 16
[optim]
batch_size = 8
epochs = 3
lr0 = 1e30
"#,
    );
    cfg.io.out_dir = tmp.path().to_path_buf();
    let err = commands::pretrain(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("abort.json")).unwrap()).unwrap();
    assert_eq!(diag["seed"], 0);
    assert!(diag["batch"].is_u64());
    assert!(!tmp.path().join("final.json").exists());
}

#[test]
fn linear_eval_is_repeatable_and_leaves_the_backbone_alone() {
    let splits = synthetic_splits(80, 16, 4, 2);
    let test = splits.test.unwrap();
    let cfg = config("[model]\nembed_dim = 16");
    let eval = EvalConfig {
        epochs: 5,
        batch_size: 20,
        ..EvalConfig::default()
    };
    let mut model = JigsawNet::<f32>::new(&cfg.model, 2, 4);
    let before = trainer::backbone_digest(&mut model);
    let a = linear_eval(&mut model, &splits.train, &test, &eval, "h").unwrap();
    let b = linear_eval(&mut model, &splits.train, &test, &eval, "h").unwrap();
    assert_eq!(trainer::backbone_digest(&mut model), before);
    assert_eq!(a.top1, b.top1);
    assert_eq!(a.per_class, b.per_class);
    assert!(a.top5.is_none(), "only four classes");
    assert_eq!(a.n_test, test.len());
}

#[test]
fn label_subsets_are_stratified_and_nested() {
    let data = synthetic(200, 8, 4, 0);
    let one = semi_split(&data, 0.1, 3, true).unwrap();
    let ten = semi_split(&data, 0.5, 3, true).unwrap();
    assert_eq!(one.len(), 20);
    assert_eq!(ten.len(), 100);
    assert!(one.iter().all(|i| ten.contains(i)));
    for c in 0..4 {
        assert_eq!(one.iter().filter(|&&i| data.labels[i] == c).count(), 5);
    }
    assert_eq!(one, semi_split(&data, 0.1, 3, true).unwrap());
    assert!(semi_split(&data, 0.001, 3, true).is_err());
}
