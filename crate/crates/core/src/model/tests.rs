use super::*;
use crate::dataset::Domain;

fn tiny_config(variant: ArchVariant) -> ArchConfig {
    ArchConfig {
        backbone: Backbone::Vgg19,
        variant,
        input_shape: (32, 32),
        block_channels: [2, 2, 2, 3, 3],
        embedding_channels: 3,
    }
}

fn random_scan(rows: usize, cols: usize, seed: u64) -> BScan {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BScan {
        image_id: format!("scan{seed}"),
        patient_id: "P0".into(),
        rows,
        cols,
        pixels: (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect(),
        domain: Domain::Source,
    }
}

#[test]
fn canonical_ragnet_vgg19_shapes() {
    let graph = build_graph(&ArchConfig::canonical(ArchVariant::RagnetV2, Backbone::Vgg19)).unwrap();
    assert_eq!(graph.pre_gap_shape(), (7, 12, 60));
    assert_eq!(graph.embedding_dim(), 60);
    assert_eq!(graph.nodes[graph.output].out_shape, Shape::Vector { d: 3 });
}

#[test]
fn canonical_ragnet_vgg16_same_spatial_shape() {
    let graph = build_graph(&ArchConfig::canonical(ArchVariant::RagnetV2, Backbone::Vgg16)).unwrap();
    let (h, w, c) = graph.pre_gap_shape();
    assert_eq!((h, w), (7, 12));
    assert_eq!(c, 60);
}

#[test]
fn baseline_vgg_shapes() {
    for backbone in [Backbone::Vgg16, Backbone::Vgg19] {
        let graph =
            build_graph(&ArchConfig::canonical(ArchVariant::VggBaseline, backbone)).unwrap();
        let (h, w, _) = graph.pre_gap_shape();
        assert_eq!((h, w), (7, 12));
        assert!(graph.attention_mask.is_none());
    }
}

/// Independent shape recomputation for every stored node shape.
#[test]
fn shape_propagation_oracle() {
    for config in [
        ArchConfig::canonical(ArchVariant::RagnetV2, Backbone::Vgg19),
        ArchConfig::canonical(ArchVariant::RagnetV2, Backbone::Vgg16),
        ArchConfig::canonical(ArchVariant::VggBaseline, Backbone::Vgg19),
        ArchConfig::reduced(ArchVariant::RagnetV2, Backbone::Vgg19, (48, 64)),
        tiny_config(ArchVariant::RagnetV2),
    ] {
        let graph = build_graph(&config).unwrap();
        let mut shapes: Vec<Shape> = Vec::new();
        for node in &graph.nodes {
            let got = match &node.op {
                LayerOp::Input { h, w, c } => Shape::Map { h: *h, w: *w, c: *c },
                LayerOp::Conv(s) => {
                    let (h, w, c) = shapes[node.inputs[0]].map();
                    assert_eq!(c, s.in_ch, "{}", node.name);
                    Shape::Map {
                        h: (h + 2 * s.pad_h - s.kh) / s.stride_h + 1,
                        w: (w + 2 * s.pad_w - s.kw) / s.stride_w + 1,
                        c: s.out_ch,
                    }
                }
                LayerOp::MaxPool { size, stride } => {
                    let (h, w, c) = shapes[node.inputs[0]].map();
                    Shape::Map {
                        h: (h - size) / stride + 1,
                        w: (w - size) / stride + 1,
                        c,
                    }
                }
                LayerOp::Concat => {
                    let (h, w, ca) = shapes[node.inputs[0]].map();
                    let (h2, w2, cb) = shapes[node.inputs[1]].map();
                    assert_eq!((h, w), (h2, w2), "{}", node.name);
                    Shape::Map { h, w, c: ca + cb }
                }
                LayerOp::Mul => {
                    let a = shapes[node.inputs[0]].map();
                    assert_eq!(a, shapes[node.inputs[1]].map(), "{}", node.name);
                    Shape::Map { h: a.0, w: a.1, c: a.2 }
                }
                LayerOp::GlobalAvgPool => Shape::Vector {
                    d: shapes[node.inputs[0]].map().2,
                },
                LayerOp::Dense { in_dim, out_dim } => {
                    assert_eq!(shapes[node.inputs[0]].vector(), *in_dim, "{}", node.name);
                    Shape::Vector { d: *out_dim }
                }
            };
            assert_eq!(got, node.out_shape, "node {}", node.name);
            shapes.push(got);
        }
    }
}

#[test]
fn frozen_mask_covers_exactly_blocks_1_to_3() {
    let config = ArchConfig::canonical(ArchVariant::RagnetV2, Backbone::Vgg19);
    let graph = build_graph(&config).unwrap();
    let params: ModelParameters<f32> = init_parameters(&graph, None, 0).unwrap();
    for (node, lp) in graph.nodes.iter().zip(&params.layers) {
        let Some(lp) = lp else { continue };
        let expect_frozen = node.name.starts_with("b1")
            || node.name.starts_with("b2")
            || node.name.starts_with("b3");
        assert_eq!(lp.frozen, expect_frozen, "layer {}", node.name);
    }
    assert_eq!(params.frozen_layers().len(), 2 + 2 + 4);
}

#[test]
fn init_is_seed_deterministic() {
    let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let a: ModelParameters<f32> = init_parameters(&graph, None, 9).unwrap();
    let b: ModelParameters<f32> = init_parameters(&graph, None, 9).unwrap();
    let c: ModelParameters<f32> = init_parameters(&graph, None, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
    for v in p {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_large_logits_no_overflow() {
    let p = softmax(&[1000.0f64, 0.0, 0.0]).unwrap();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_frozen_reference_values() {
    // high-precision evaluation of exp(i)/sum(exp(1..=3))
    let p = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
    assert!((p[0] - 0.0900306).abs() < 1e-6);
    assert!((p[1] - 0.2447285).abs() < 1e-6);
    assert!((p[2] - 0.6652410).abs() < 1e-6);
}

#[test]
fn softmax_shift_invariance() {
    let s = [0.3f64, -1.2, 2.7];
    let a = softmax(&s).unwrap();
    let b = softmax(&s.map(|v| v + 41.5)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn softmax_rejects_non_finite() {
    assert!(matches!(
        softmax(&[f64::NAN, 0.0, 0.0]),
        Err(ModelError::NonFiniteLogit)
    ));
}

#[test]
fn forward_trace_invariants() {
    let config = tiny_config(ArchVariant::RagnetV2);
    let graph = build_graph(&config).unwrap();
    let params: ModelParameters<f64> = init_parameters(&graph, None, 3).unwrap();
    let batch: Vec<BScan> = (0..4).map(|i| random_scan(32, 32, i)).collect();
    let traces = forward(&params, &graph, &batch).unwrap();
    assert_eq!(traces.len(), 4);
    for trace in &traces {
        // embedding is the spatial mean of the feature volume per channel
        let means = trace.feature_volume.channel_means();
        for (z, m) in trace.embedding.iter().zip(&means) {
            assert!((z - m).abs() < 1e-12);
        }
        // attention mask strictly inside (0, 1)
        let mask = trace.attention_mask.as_ref().unwrap();
        assert!(mask.data.iter().all(|&v| v > 0.0 && v < 1.0));
        // probabilities strictly positive, summing to one
        let sum: f64 = trace.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(trace.probabilities.iter().all(|&p| p > 0.0));
    }
    // order preservation: forward of a single scan matches its batch slot
    let single = forward(&params, &graph, &batch[2..3]).unwrap();
    assert_eq!(single[0].logits, traces[2].logits);
}

#[test]
fn forward_is_deterministic() {
    let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let params: ModelParameters<f32> = init_parameters(&graph, None, 5).unwrap();
    let batch = vec![random_scan(32, 32, 0)];
    let a = forward(&params, &graph, &batch).unwrap();
    let b = forward(&params, &graph, &batch).unwrap();
    assert_eq!(a[0].logits, b[0].logits);
    assert_eq!(a[0].feature_volume.data, b[0].feature_volume.data);
}

#[test]
fn forward_rejects_wrong_shape() {
    let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let params: ModelParameters<f32> = init_parameters(&graph, None, 5).unwrap();
    let batch = vec![random_scan(16, 32, 0)];
    assert!(matches!(
        forward(&params, &graph, &batch),
        Err(ModelError::ShapeMismatch(_))
    ));
    assert!(matches!(
        forward::<f32>(&params, &graph, &[]),
        Err(ModelError::EmptyBatch)
    ));
}

#[test]
fn probability_validity_over_random_models() {
    for seed in 0..5u64 {
        let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
        let params: ModelParameters<f32> = init_parameters(&graph, None, seed).unwrap();
        let batch = vec![random_scan(32, 32, seed + 100)];
        let t = &forward(&params, &graph, &batch).unwrap()[0];
        let sum: f32 = t.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(t.probabilities.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn bundle_round_trip_is_bitwise() {
    let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let params: ModelParameters<f32> = init_parameters(&graph, None, 21).unwrap();
    let bundle = WeightBundle::from_params(&graph, &params);
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let loaded = WeightBundle::load(dir.path()).unwrap();
    let reloaded: ModelParameters<f32> = init_parameters(&graph, Some(&loaded), 999).unwrap();
    assert_eq!(params, reloaded);
}

#[test]
fn bundle_shape_mismatch_rejected() {
    let graph_a = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let params_a: ModelParameters<f32> = init_parameters(&graph_a, None, 0).unwrap();
    let bundle = WeightBundle::from_params(&graph_a, &params_a);
    let mut bigger = tiny_config(ArchVariant::RagnetV2);
    bigger.block_channels = [4, 4, 4, 6, 6];
    let graph_b = build_graph(&bigger).unwrap();
    assert!(matches!(
        init_parameters::<f32>(&graph_b, Some(&bundle), 0),
        Err(ModelError::ShapeMismatch(_))
    ));
}

#[test]
fn unknown_backbone_parse() {
    assert!(matches!(
        "resnet".parse::<Backbone>(),
        Err(ModelError::UnknownBackbone(_))
    ));
}

#[test]
fn graph_serializes_to_json() {
    let graph = build_graph(&tiny_config(ArchVariant::RagnetV2)).unwrap();
    let json = serde_json::to_string(&graph).unwrap();
    let back: ArchitectureGraph = serde_json::from_str(&json).unwrap();
    assert_eq!(graph, back);
}
