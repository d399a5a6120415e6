mod common;

use common::*;
use dgcnet::tensor::max_abs_diff;
use dgcnet::{ForwardOptions, Model, ModelConfig, Shape5, Tape};

#[test]
fn variants_have_expected_topology() {
    for (name, layers, classifier) in [
        ("small", [4, 6, 8], 16 + 4 * 8 + 6 * 16 + 8 * 32),
        ("base", [10, 10, 10], 16 + 10 * (8 + 16 + 32)),
        ("large", [14, 14, 14], 16 + 14 * (8 + 16 + 32)),
    ] {
        let cfg = ModelConfig::named(name).unwrap();
        assert_eq!(cfg.growth_rates(), vec![8, 16, 32]);
        assert_eq!(cfg.layers_per_block, layers);
        assert_eq!(cfg.classifier_channels(), classifier);
        let model = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.classifier_in_channels(), classifier);
        assert_eq!(model.layers().len(), layers.iter().sum::<usize>());
        // each layer sees the stem plus every earlier layer
        let mut expected = 16;
        for l in model.layers() {
            assert_eq!(l.in_channels, expected, "{name} {}", l.name);
            assert_eq!(l.growth, 8 << (l.block - 1));
            expected += l.growth;
        }
        assert_eq!(model.registry().total_channels(), classifier);
        let b = model.count_params();
        assert_eq!(b.total, model.params().numel());
    }
    let count = |n: &str| Model::new(ModelConfig::named(n).unwrap(), 0).unwrap().count_params().total;
    assert!(count("small") < count("base") && count("base") < count("large"));
    assert!(ModelConfig::named("huge").is_none());
}

#[test]
fn parameters_are_registered_in_construction_order() {
    let model = Model::new(tiny_model_config(), 0).unwrap();
    let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names[0], "stem.conv");
    assert_eq!(names[1], "block1.layer1.bn1.scale");
    assert_eq!(*names.last().unwrap(), "classifier.bias");
    let first = |prefix: &str| names.iter().position(|n| n.starts_with(prefix)).unwrap();
    assert!(first("block1.layer2") < first("block2.layer1"));
    for (i, p) in model.params().iter().enumerate() {
        assert_eq!(p.id.0, i);
    }
}

#[test]
fn construction_is_deterministic_per_seed() {
    let a = Model::new(tiny_model_config(), 11).unwrap();
    let b = Model::new(tiny_model_config(), 11).unwrap();
    let c = Model::new(tiny_model_config(), 12).unwrap();
    assert_eq!(a.params().flatten(), b.params().flatten());
    assert_ne!(a.params().flatten(), c.params().flatten());
}

#[test]
fn masked_and_gathered_paths_agree() {
    let model = Model::new(tiny_model_config(), 3).unwrap();
    let mut r = rng(3);
    for eps in [0.0, 0.25, 0.5, 0.75] {
        let x = random_tensor(Shape5::new(3, 1, 12, 5, 5), &mut r);
        let masked = model
            .logits(&x, ForwardOptions {
                path: dgcnet::densenet::ExecPath::Masked,
                ..ForwardOptions::infer(eps)
            })
            .unwrap();
        let gathered = model.logits(&x, ForwardOptions::infer(eps)).unwrap();
        assert!(max_abs_diff(masked.data(), gathered.data()) <= 1e-12, "eps {eps}");
    }
}

#[test]
fn gathered_path_macs_match_the_analytic_count() {
    let model = Model::new(tiny_model_config(), 4).unwrap();
    let x = random_tensor(Shape5::new(2, 1, 12, 5, 5), &mut rng(4));
    for eps in [0.0, 0.5] {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &x, ForwardOptions::infer(eps)).unwrap();
        let report = model.count_macs(eps).unwrap();
        assert_eq!(out.dgc_macs.conv, 2 * report.dgc_conv_pruned());
        let saliency: u64 = report.layers.iter().map(|l| l.dgc.saliency_macs).sum();
        assert_eq!(out.dgc_macs.saliency, 2 * saliency);
    }
    let report = model.count_macs(0.5).unwrap();
    assert!(report.pruned_total < report.dense_total);
    assert!(report.saving_ratio() > 1.0);
}

#[test]
fn untrained_model_is_close_to_uniform() {
    for seed in 0..4 {
        let model = Model::new(tiny_model_config(), seed).unwrap();
        let x = random_tensor(Shape5::new(4, 1, 12, 5, 5), &mut rng(100 + seed));
        let probs = model.predict(&x, 0.5).unwrap();
        for row in probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p < 0.9), "seed {seed}: {row:?}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let model = Model::new(tiny_model_config(), 5).unwrap();
    let x = random_tensor(Shape5::new(3, 1, 12, 5, 5), &mut rng(5));
    let check = model_grad_check(&model, &x, &[0, 2, 1], 0.5, 40, 1e-4, 5);
    assert!(check.worst < 1e-5, "worst relative error {}", check.worst);
    assert!(check.skipped <= check.checked, "selection too unstable: {} skipped", check.skipped);
}

#[test]
fn training_forward_updates_running_statistics_only_when_applied() {
    let mut model = Model::new(tiny_model_config(), 6).unwrap();
    let before = model.clone();
    let x = random_tensor(Shape5::new(4, 1, 12, 5, 5), &mut rng(6));
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, ForwardOptions::train(0.5)).unwrap();
    assert_eq!(model, before);
    assert_eq!(out.bn_stats.len(), model.layers().len());
    model.apply_bn_stats(&out.bn_stats);
    assert_eq!(model.params(), before.params());
    assert_ne!(model.buffers(), before.buffers());
}

#[test]
fn rejects_wrong_input_shapes() {
    let model = Model::new(tiny_model_config(), 0).unwrap();
    for shape in [Shape5::new(1, 2, 12, 5, 5), Shape5::new(1, 1, 11, 5, 5), Shape5::new(1, 1, 12, 5, 4)] {
        let x = random_tensor(shape, &mut rng(0));
        assert!(model.predict(&x, 0.0).is_err(), "{shape}");
    }
    let x = random_tensor(Shape5::new(1, 1, 12, 5, 5), &mut rng(0));
    assert!(model.forward(&mut Tape::new(), &x, ForwardOptions::infer(0.0)).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_model_config();
    let cases = [
        ModelConfig { stages: 3, ..base.clone() },
        ModelConfig { heads: 0, ..base.clone() },
        ModelConfig { gate_factor: 0.0, ..base.clone() },
        ModelConfig { num_classes: 0, ..base.clone() },
        ModelConfig { input_extent: [12, 1, 1], stages: 2, ..base.clone() },
    ];
    for cfg in cases {
        assert!(Model::new(cfg.clone(), 0).is_err(), "{cfg:?}");
    }
}
