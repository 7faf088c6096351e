mod common;

use ceg_core::causal::{NodeKind, TestConfig};
use ceg_core::graph::{
    ate_heatmap_csv, export_graph, graph_from_json, graph_to_dot, graph_to_json, infer_graph,
    stability_study, GraphFormat,
};
use ceg_core::intervention::InterventionPolicy;
use ceg_core::LayerSpec;
use ceg_core::Network;
use common::*;

/// Input -> 2 hidden -> 3 hidden -> 2 classes, all positive activations.
/// Class 0 depends on hidden2 unit 0 alone, which reads hidden1 unit 0.
/// Hidden2 unit 2 suppresses class 0.
fn chain_net() -> Network {
    let fc1 = t(&[2, 2], &[1.0, 0.2, 0.1, 1.0]);
    let fc2 = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.3, 0.3]);
    let fc3 = t(&[2, 3], &[1.0, 0.0, -0.5, 0.0, 1.0, 0.0]);
    Network::new(
        vec![
            LayerSpec::dense("fc1", fc1, None),
            LayerSpec::relu("r1"),
            LayerSpec::dense("fc2", fc2, None),
            LayerSpec::relu("r2"),
            LayerSpec::dense("fc3", fc3, None),
        ],
        vec![2],
        2,
        None,
    )
    .unwrap()
}

#[test]
fn toy_chain_graph() {
    let net = chain_net();
    let x = positive_inputs(50, 11);
    let (g, d) = infer_graph(&net, &x, 0, &InterventionPolicy::binary(), &TestConfig::default(), 0).unwrap();
    assert_eq!(g.output_layer, 3);
    assert_eq!(g.critical_nodes(3), vec![0]);
    assert_eq!(g.critical_nodes(2), vec![0]);
    assert_eq!(g.critical_nodes(1), vec![0]);
    assert_eq!(d.layers[0].layer, 2);
    assert_eq!(d.layers[0].noisy.iter().map(|n| n.node).collect::<Vec<_>>(), vec![2]);
    assert_eq!(g.edges(2), vec![(0, 0)]);
}

#[test]
fn targets_thread_and_evaluations_match_closed_form() {
    let net = lenet();
    let xk = val_set().filter_by_class(3, 10).unwrap();
    let (g, d) = infer_graph(&net, &xk.images, 3, &InterventionPolicy::binary(), &TestConfig::default(), 5).unwrap();
    assert_eq!(g.layers.iter().map(|l| l.layer).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    assert_eq!(g.layer(4).unwrap().targets, vec![3]);
    for l in 1..4 {
        assert_eq!(g.layer(l).unwrap().targets, g.critical_nodes(l + 1), "layer {l}");
    }
    let expected: usize = (1..5).map(|l| net.nodes(l).unwrap() * xk.len()).sum();
    assert_eq!(g.te_evaluations, expected);
    for (gl, dl) in g.layers.iter().zip(&d.layers) {
        let noisy: Vec<usize> = dl.noisy.iter().map(|n| n.node).collect();
        assert!(gl.critical_nodes().iter().all(|j| !noisy.contains(j)));
        assert!(dl.noisy.iter().all(|n| n.kind == NodeKind::Noisy));
        for (j, t) in g.edges(gl.layer) {
            assert!(j < net.nodes(gl.layer).unwrap() && t < net.nodes(gl.layer + 1).unwrap());
        }
    }
}

#[test]
fn json_round_trip_and_dot_syntax() {
    let net = chain_net();
    let x = positive_inputs(50, 12);
    let (g, d) = infer_graph(&net, &x, 0, &InterventionPolicy::binary(), &TestConfig::default(), 0).unwrap();
    let json = graph_to_json(&g, &d, None);
    let (g2, d2) = graph_from_json(&json).unwrap();
    assert_eq!(graph_to_json(&g2, &d2, None), json);
    assert_eq!(g2.critical_nodes(1), g.critical_nodes(1));
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["class_id", "alpha", "policy", "layers"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    let layer = &value["layers"][0];
    for key in ["layer", "critical", "noisy", "targets"] {
        assert!(layer.get(key).is_some(), "missing layer.{key}");
    }
    for key in ["node", "mean_te", "std_te", "z", "p"] {
        assert!(layer["critical"][0].get(key).is_some(), "missing critical.{key}");
    }
    check_dot(&graph_to_dot(&g, &d));

    let dir = tempfile::tempdir().unwrap();
    export_graph(&g, &d, GraphFormat::Json, dir.path().join("g.json")).unwrap();
    export_graph(&g, &d, GraphFormat::Dot, dir.path().join("g.dot")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("g.json")).unwrap(), json);
}

#[test]
fn empty_graph_is_valid() {
    // Class 1 ignores every input, so nothing is critical.
    let net = Network::new(
        vec![
            LayerSpec::dense("fc1", t(&[2, 2], &[1., 0., 0., 1.]), None),
            LayerSpec::dense("fc2", t(&[2, 2], &[1., 1., 0., 0.]), None),
        ],
        vec![2],
        2,
        None,
    )
    .unwrap();
    let x = positive_inputs(40, 1);
    let (g, d) = infer_graph(&net, &x, 1, &InterventionPolicy::binary(), &TestConfig::default(), 0).unwrap();
    assert_eq!(g.critical_count(), 0);
    let value: serde_json::Value = serde_json::from_str(&graph_to_json(&g, &d, None)).unwrap();
    assert_eq!(value["layers"][0]["critical"], serde_json::json!([]));
    check_dot(&graph_to_dot(&g, &d));
}

#[test]
fn descent_stops_without_targets() {
    let net = Network::new(
        vec![
            LayerSpec::dense("fc1", t(&[2, 2], &[1., 0., 0., 1.]), None),
            LayerSpec::dense("fc2", t(&[2, 2], &[1., 0., 0., 1.]), None),
            LayerSpec::dense("fc3", t(&[2, 2], &[1., 1., 0., 0.]), None),
        ],
        vec![2],
        2,
        None,
    )
    .unwrap();
    let x = positive_inputs(40, 2);
    let (g, _) = infer_graph(&net, &x, 1, &InterventionPolicy::binary(), &TestConfig::default(), 0).unwrap();
    assert!(g.layer(2).unwrap().evaluated);
    assert!(!g.layer(1).unwrap().evaluated);
    assert_eq!(g.te_evaluations, 2 * 40);
}

#[test]
fn heatmap_has_one_column_per_layer() {
    let net = chain_net();
    let x = positive_inputs(50, 13);
    let (g, _) = infer_graph(&net, &x, 0, &InterventionPolicy::binary(), &TestConfig::default(), 0).unwrap();
    let csv = ate_heatmap_csv(&g);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "node,layer1,layer2");
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[3].starts_with("2,,"));
    let cell: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let d = g.decision(2, 0).unwrap();
    assert!((cell - d.mean_te / g.baseline_logit_mean.abs()).abs() < 1e-12);
}

#[test]
fn stability_on_toy_net_is_reproducible() {
    let net = chain_net();
    let x = positive_inputs(50, 14);
    let cfg = TestConfig::default();
    let a = stability_study(&net, &x, 0, 10, (0.2, 0.21), 0.01, &cfg, 9).unwrap();
    let b = stability_study(&net, &x, 0, 10, (0.2, 0.21), 0.01, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.b_schedule.len(), 1);
    assert!(a.nodes.iter().all(|n| n.frequency == 0.0 || n.frequency == 1.0));
    assert_eq!(a.always_fraction, 1.0);
    assert!((a.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(stability_study(&net, &x, 0, 5, (0.01, 0.5), 0.01, &cfg, 0).is_err());
}

/// Minimal structural check of the Graphviz output: a single digraph block,
/// balanced braces and brackets, and every statement terminated.
fn check_dot(dot: &str) {
    let mut lines = dot.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("digraph ") && head.ends_with('{'), "{head}");
    let mut depth = 1i32;
    for line in lines {
        let s = line.trim();
        assert_eq!(s.matches('[').count(), s.matches(']').count(), "{s}");
        assert_eq!(s.matches('"').count() % 2, 0, "{s}");
        if s.ends_with('{') {
            assert!(s.starts_with("subgraph cluster_"), "{s}");
            depth += 1;
        } else if s == "}" {
            depth -= 1;
        } else {
            assert!(s.ends_with(';'), "{s}");
        }
    }
    assert_eq!(depth, 0);
}
