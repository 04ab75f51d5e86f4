//! Model instantiation, seeded initialization, and checkpoint round trips.

use atacnet::autograd::{ParamKind, Tape};
use atacnet::graph::{build_resnet20v2, GraphNode, LayerSpec, ModelGraph, ReplacementPolicy};
use atacnet::model::{CheckpointMeta, Model};
use atacnet::nn::{ActivationKind, BnMode};
use atacnet::tensor::{ConvSpec, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng_images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = n * 3 * 32 * 32;
    Tensor::new(
        vec![n, 3, 32, 32],
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn instantiated_parameters_match_static_count() {
    for ratio in [0.0, 0.5, 1.0] {
        let graph = build_resnet20v2(1, 10, ActivationKind::Relu)
            .unwrap()
            .apply_replacement(&ReplacementPolicy::Ratio(ratio), 2)
            .unwrap();
        let static_count = graph.count_params();
        let model = Model::new(graph).unwrap();
        assert_eq!(model.param_count(), static_count, "ratio {ratio}");
    }
    let se = build_resnet20v2(1, 10, ActivationKind::SeActivation { r: 2 }).unwrap();
    let static_count = se.count_params();
    assert_eq!(Model::new(se).unwrap().param_count(), static_count);
}

#[test]
fn he_init_is_deterministic_and_scaled() {
    let graph = build_resnet20v2(1, 10, ActivationKind::Relu).unwrap();
    let mut a = Model::new(graph.clone()).unwrap();
    let mut b = Model::new(graph).unwrap();
    a.he_init(42);
    b.he_init(42);
    for (pa, pb) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
    }
    let mut c = Model::new(build_resnet20v2(1, 10, ActivationKind::Relu).unwrap()).unwrap();
    c.he_init(43);
    let same: bool = a
        .params
        .iter()
        .zip(c.params.iter())
        .all(|(x, y)| x.value.data() == y.value.data());
    assert!(!same, "different seeds should differ");

    // statistical check on a conv with fan-in 9*64 and >= 10^4 weights
    let wide = ModelGraph {
        name: "wide".into(),
        nodes: vec![
            GraphNode {
                layer: LayerSpec::Input { channels: 64, height: 8, width: 8 },
                inputs: vec![],
                label: "input".into(),
            },
            GraphNode {
                layer: LayerSpec::Conv(ConvSpec::new(64, 32, 3, 1, 1)),
                inputs: vec![0],
                label: "conv".into(),
            },
        ],
        num_classes: 0,
    };
    let mut m = Model::new(wide).unwrap();
    m.he_init(7);
    let w = m.params.iter().next().unwrap();
    assert_eq!(w.value.numel(), 32 * 64 * 9);
    let n = w.value.numel() as f64;
    let mean: f64 = w.value.data().iter().sum::<f64>() / n;
    let std: f64 = (w.value.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let expected = (2.0f64 / (9.0 * 64.0)).sqrt();
    assert!((std - expected).abs() / expected < 0.1, "std {std} vs {expected}");
    assert!(mean.abs() < 0.1 * expected);

    // BN affine initialized at (1, 0)
    for p in a.params.iter() {
        match p.kind {
            ParamKind::BnGamma => assert!(p.value.data().iter().all(|&v| v == 1.0)),
            ParamKind::BnBeta | ParamKind::Bias => assert!(p.value.data().iter().all(|&v| v == 0.0)),
            _ => {}
        }
    }
}

#[test]
fn forward_shape_preserved_across_replacement() {
    let images = rng_images(2, 1);
    for ratio in [0.0, 0.3, 1.0] {
        let graph = build_resnet20v2(1, 10, ActivationKind::Relu)
            .unwrap()
            .apply_replacement(&ReplacementPolicy::Ratio(ratio), 2)
            .unwrap();
        let mut model = Model::new(graph).unwrap();
        model.he_init(5);
        let mut tape = Tape::new();
        let input = tape.input(images.clone());
        let logits = model.forward(&mut tape, input, BnMode::Eval).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 10], "ratio {ratio}");
        assert!(tape.value(logits).is_finite());
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let graph = build_resnet20v2(1, 10, ActivationKind::Relu)
        .unwrap()
        .apply_replacement(&ReplacementPolicy::Ratio(0.5), 2)
        .unwrap();
    let mut model = Model::new(graph.clone()).unwrap();
    model.he_init(11);

    // move BN buffers off their defaults so the round trip covers them
    let images = rng_images(4, 2);
    let mut tape = Tape::new();
    let input = tape.input(images.clone());
    model.forward(&mut tape, input, BnMode::Train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let meta = CheckpointMeta {
        model_spec: "resnet20v2 b=1 classes=10 activation=relu ratio=0.5 r=2".into(),
        epochs_completed: 3,
    };
    model.save_checkpoint(&path, &meta).unwrap();

    let mut restored = Model::new(graph).unwrap();
    let loaded = restored.load_checkpoint(&path).unwrap();
    assert_eq!(loaded, meta);
    for (a, b) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{} value", a.name);
        assert_eq!(a.momentum.data(), b.momentum.data(), "{} momentum", a.name);
    }

    // identical eval outputs after restore
    let mut t1 = Tape::new();
    let i1 = t1.input(images.clone());
    let l1 = model.forward(&mut t1, i1, BnMode::Eval).unwrap();
    let mut t2 = Tape::new();
    let i2 = t2.input(images);
    let l2 = restored.forward(&mut t2, i2, BnMode::Eval).unwrap();
    assert_eq!(t1.value(l1).data(), t2.value(l2).data());
}

#[test]
fn checkpoint_rejects_mismatched_graph() {
    let graph = build_resnet20v2(1, 10, ActivationKind::Relu).unwrap();
    let mut model = Model::new(graph).unwrap();
    model.he_init(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model
        .save_checkpoint(
            &path,
            &CheckpointMeta {
                model_spec: "resnet20v2 b=1 classes=10 activation=relu ratio=0 r=2".into(),
                epochs_completed: 1,
            },
        )
        .unwrap();

    // wrong depth: the first divergent manifest line is named
    let wrong_b = build_resnet20v2(2, 10, ActivationKind::Relu).unwrap();
    let err = Model::new(wrong_b).unwrap().load_checkpoint(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("diverges") || msg.contains("missing"), "{msg}");
    assert!(msg.contains("stage"), "{msg}");

    // wrong activation kinds diverge too
    let wrong_kind = build_resnet20v2(1, 10, ActivationKind::Swish).unwrap();
    assert!(Model::new(wrong_kind).unwrap().load_checkpoint(&path).is_err());
}
