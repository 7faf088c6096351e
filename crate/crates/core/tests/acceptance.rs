//! Acceptance gate on the committed LeNet fixture. Prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use ceg_core::causal::{treatment_effect, z_test, NodeKind, TeSamples, TestConfig};
use ceg_core::graph::{graph_to_json, infer_graph, stability_study, CausalGraph};
use ceg_core::intervention::{InterventionPolicy, PathGroup};
use ceg_core::metrics::{
    default_noise_sigma, fidelity_curve, irof, lipschitz_estimate, random_mask_curve, repair_eval,
    CausalExplainer, OcclusionExplainer, RandomExplainer,
};
use ceg_core::{LayerKind, LayerSpec, Network, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn main() {
    let net = lenet();
    let val = val_set();
    let test = test_set();
    let cfg = TestConfig::default();
    let reference_batch = test.images.select(&(0..64).collect::<Vec<_>>());
    let snapshot = net.forward(&reference_batch).unwrap();

    let mut out = Vec::new();
    out.push(te_oracle());
    out.push(z_test_oracle());
    out.push(stability(&net, &val, &cfg));

    let graphs: Vec<CausalGraph> = (0..10)
        .map(|k| {
            let xk = val.filter_by_class(k, 10).unwrap();
            infer_graph(&net, &xk.images, k, &InterventionPolicy::binary(), &cfg, SEED).unwrap().0
        })
        .collect();
    out.push(agreement(&net, &val, &cfg, &graphs));
    out.push(fidelity(&net, &test, &graphs));
    let (le, irof_outcome) = explanation_metrics(&net, &test, &graphs);
    out.push(le);
    out.push(irof_outcome);
    out.push(determinism(&net, &val, &cfg));
    out.push(repair(&net, &val, &test, &cfg));

    let after = net.forward(&reference_batch).unwrap();
    let identical = after.data().iter().zip(snapshot.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    out.push(Outcome {
        id: 8,
        name: "non-destructive interventions",
        pass: identical && after.shape() == snapshot.shape() && net == lenet(),
        detail: format!("forward on {} reference images bit-identical after the suite: {identical}", reference_batch.batch()),
    });

    out.sort_by_key(|o| o.id);
    println!();
    for o in &out {
        println!("[{}] {:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let conv2 = graphs[3].critical_nodes(2).len();
    println!(
        "[NOTE]    conv2 critical nodes for digit 3: {conv2} of {} (reference magnitude 8, band 4..=12)",
        net.nodes(2).unwrap()
    );
    let failed = out.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", out.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Child-layer weights with the path group scaled by `beta`, edited directly
/// on a copy of the layer list.
fn edited_layers(net: &Network, g: &PathGroup, beta: f32) -> Vec<LayerSpec> {
    let mut layers = net.layers().to_vec();
    let child_index = net.graph_layer(g.parent_layer + 1).unwrap().layer_index;
    let parent = net.graph_layer(g.parent_layer).unwrap().clone();
    let w = layers[child_index].weight.as_mut().unwrap();
    let shape = w.shape().to_vec();
    let row: usize = shape[1..].iter().product();
    let data = w.data_mut();
    for &t in &g.targets {
        match layers_kind(net, child_index) {
            LayerKind::Conv2d => {
                let k = shape[2] * shape[3];
                for e in 0..k {
                    data[t * row + g.parent_node * k + e] *= beta;
                }
            }
            _ => match parent.node_plane {
                Some((h, wd)) => {
                    for e in 0..h * wd {
                        data[t * row + g.parent_node * h * wd + e] *= beta;
                    }
                }
                None => data[t * row + g.parent_node] *= beta,
            },
        }
    }
    layers
}

fn layers_kind(net: &Network, index: usize) -> LayerKind {
    net.layers()[index].kind
}

fn te_oracle() -> Outcome {
    let net = identity_222();
    let x = t(&[1, 2], &[2.0, 3.0]);
    // (parent node, targets, beta, class, expected TE)
    let hand: [(usize, &[usize], f64, usize, f64); 5] = [
        (0, &[0], 0.0, 0, -2.0),
        (1, &[1], 0.0, 1, -3.0),
        (0, &[0], 0.5, 0, -1.0),
        (0, &[0, 1], 0.0, 1, 0.0),
        (1, &[0, 1], 0.25, 1, -2.25),
    ];
    let mut worst_hand = 0f64;
    for (j, targets, beta, k, expected) in hand {
        let g = PathGroup::new(&net, 1, j, targets).unwrap();
        let te = treatment_effect(&net, &g, beta, &x, k).unwrap();
        worst_hand = worst_hand.max((te.values[0] - expected).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_random = 0f64;
    for _ in 0..50 {
        let net = random_small_net(&mut rng);
        let n = 5;
        let data: Vec<f32> = (0..n * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let images = t(&[n, 1, 4, 4], &data);
        let l = rng.random_range(1..net.graph_layers());
        let n_child = net.nodes(l + 1).unwrap();
        let mut targets: Vec<usize> = (0..n_child).filter(|_| rng.random_bool(0.5)).collect();
        if targets.is_empty() {
            targets.push(0);
        }
        let g = PathGroup::new(&net, l, rng.random_range(0..net.nodes(l).unwrap()), &targets).unwrap();
        let beta = rng.random_range(0.0f32..1.0);
        let k = rng.random_range(0..2);
        let te = treatment_effect(&net, &g, beta as f64, &images, k).unwrap();
        let edited = edited_layers(&net, &g, beta);
        for i in 0..n {
            let item = images.item(i);
            let oracle = naive_forward(&edited, net.input_shape(), item)[k]
                - naive_forward(net.layers(), net.input_shape(), item)[k];
            worst_random = worst_random.max((te.values[i] - oracle).abs());
        }
    }
    Outcome {
        id: 1,
        name: "TE oracle equivalence",
        pass: worst_hand <= 1e-6 && worst_random <= 1e-5,
        detail: format!(
            "hand cases max err {worst_hand:.2e} (tol 1e-6); 50 random nets vs naive forward max err {worst_random:.2e} (tol 1e-5)"
        ),
    }
}

/// Upper normal tail by composite Simpson quadrature of the density.
fn upper_tail(z: f64) -> f64 {
    let (a, b, n) = (z, z + 40.0, 400_000);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn z_test_oracle() -> Outcome {
    let net = identity_222();
    let group = PathGroup::new(&net, 1, 0, &[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let cfg = TestConfig::default();
    let (mut worst_z, mut worst_p, mut kinds_ok) = (0f64, 0f64, true);
    for case in 0..20 {
        let n = [30, 31, 50, 64, 100, 257, 1000][case % 7];
        let mean = [-0.5, 0.5, 0.01, -0.02, 0.3, -0.15, 0.0, 0.08, -1.2, 0.04][case % 10];
        let spread = [1.0, 0.3, 2.5, 0.05][case % 4];
        let values: Vec<f64> = (0..n).map(|_| mean + spread * rng.random_range(-1.0..1.0)).collect();
        let m = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        let z = m / (sd / (n as f64).sqrt());
        let p = 2.0 * upper_tail(z.abs());
        let te = TeSamples {
            group: group.clone(),
            beta: 0.0,
            class_id: 0,
            values,
        };
        let d = z_test(&te, &cfg).unwrap();
        worst_z = worst_z.max((d.z - z).abs() / z.abs().max(1.0));
        worst_p = worst_p.max((d.p - p).abs());
        let expected = if p < cfg.alpha && m < 0.0 {
            NodeKind::Critical
        } else if p < cfg.alpha && m > 0.0 {
            NodeKind::Noisy
        } else {
            NodeKind::Neutral
        };
        kinds_ok &= d.kind == expected;
    }
    Outcome {
        id: 2,
        name: "z-test correctness",
        pass: worst_z <= 1e-9 && worst_p <= 1e-9 && kinds_ok,
        detail: format!(
            "20 cases vs quadrature oracle: max z err {worst_z:.2e}, max p err {worst_p:.2e} (tol 1e-9); kinds match: {kinds_ok}"
        ),
    }
}

fn stability(net: &Network, val: &ceg_core::io::LabeledDataset, cfg: &TestConfig) -> Outcome {
    let xk = val.filter_by_class(3, 10).unwrap();
    let start = Instant::now();
    let report = stability_study(net, &xk.images, 3, 100, (0.01, 0.5), 0.01, cfg, SEED).unwrap();
    let elapsed = start.elapsed();
    let share = report.fraction_at_least(0.95);
    Outcome {
        id: 3,
        name: "graph stability",
        pass: share >= 0.95 && elapsed <= Duration::from_secs(15 * 60),
        detail: format!(
            "100 runs, b in (0.01, 0.5), digit 3 ({} images): {:.1}% of {} nodes at frequency >= 0.95 (need 95%), {:.1}% in every run; {:.0?} (budget 15 min)",
            xk.len(),
            share * 100.0,
            report.nodes.len(),
            report.always_fraction * 100.0,
            elapsed
        ),
    }
}

fn agreement(
    net: &Network,
    val: &ceg_core::io::LabeledDataset,
    cfg: &TestConfig,
    binary: &[CausalGraph],
) -> Outcome {
    let policy = InterventionPolicy::continuous(0.5, 0.01).unwrap();
    let layers = net.graph_layers() - 1;
    // Per layer, pooled over the ten digit graphs.
    let (mut same, mut total) = (vec![0usize; layers + 1], vec![0usize; layers + 1]);
    let mut worst_cell = (1.0f64, 0, 0);
    for (k, gb) in binary.iter().enumerate() {
        let xk = val.filter_by_class(k, 10).unwrap();
        let (gc, _) = infer_graph(net, &xk.images, k, &policy, cfg, SEED).unwrap();
        for lb in &gb.layers {
            let lc = gc.layer(lb.layer).unwrap();
            let n = net.nodes(lb.layer).unwrap();
            let kind = |decisions: &[ceg_core::causal::NodeDecision], j: usize| {
                decisions.iter().find(|d| d.node == j).map(|d| d.kind).unwrap_or(NodeKind::Neutral)
            };
            let agree = (0..n).filter(|&j| kind(&lb.decisions, j) == kind(&lc.decisions, j)).count();
            same[lb.layer] += agree;
            total[lb.layer] += n;
            let rate = agree as f64 / n as f64;
            if rate < worst_cell.0 {
                worst_cell = (rate, k, lb.layer);
            }
        }
    }
    let rates: Vec<f64> = (1..=layers).map(|l| same[l] as f64 / total[l] as f64).collect();
    let lowest = rates.iter().cloned().fold(1.0, f64::min);
    let shown: Vec<String> = rates.iter().enumerate().map(|(i, r)| format!("l{}={:.1}%", i + 1, r * 100.0)).collect();
    Outcome {
        id: 4,
        name: "binary/continuous agreement",
        pass: lowest >= 0.90,
        detail: format!(
            "per-layer agreement over 10 digit graphs {} (need 90% each); lowest single digit/layer {:.1}% (digit {}, layer {})",
            shown.join(" "),
            worst_cell.0 * 100.0,
            worst_cell.1,
            worst_cell.2
        ),
    }
}

fn fidelity(net: &Network, test: &ceg_core::io::LabeledDataset, graphs: &[CausalGraph]) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for (k, g) in graphs.iter().enumerate() {
        let tk = test.filter_by_class(k, 10).unwrap();
        let logits = net.forward(&tk.images).unwrap();
        let base = (0..tk.len()).filter(|&i| argmax(logits.item(i)) == k).count() as f64 / tk.len() as f64;
        let critical = fidelity_curve(net, g, &tk.images, k, &[0.2]).unwrap()[0].clone();
        let random = random_mask_curve(net, g, &tk.images, k, &[0.2], SEED + k as u64).unwrap()[0].clone();
        let (dc, dr) = (base - critical.accuracy, base - random.accuracy);
        if dc >= 2.0 * dr {
            wins += 1;
        }
        rows.push(format!("{k}:{dc:.2}/{dr:.2}"));
    }
    Outcome {
        id: 5,
        name: "fidelity",
        pass: wins >= 8,
        detail: format!(
            "top-20% critical drop >= 2x random non-critical drop for {wins}/10 digits (need 8); drops critical/random {}",
            rows.join(" ")
        ),
    }
}

fn explanation_metrics(
    net: &Network,
    test: &ceg_core::io::LabeledDataset,
    graphs: &[CausalGraph],
) -> (Outcome, Outcome) {
    let n = 50;
    let random = RandomExplainer::new(net, SEED);
    let (mut le_c, mut le_o, mut le_r, mut ir_c, mut ir_r) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let x = test.images.select(&[i]);
        let k = test.labels[i];
        let causal = CausalExplainer::new(net, &graphs[k]);
        let occlusion = OcclusionExplainer::new(net, k);
        let sigma = default_noise_sigma(&x);
        let seed = SEED + i as u64;
        le_c += lipschitz_estimate(&causal, &x, sigma, 10, seed).unwrap();
        le_o += lipschitz_estimate(&occlusion, &x, sigma, 10, seed).unwrap();
        le_r += lipschitz_estimate(&random, &x, sigma, 10, seed).unwrap();
        ir_c += irof(net, &causal, &x, k, 7).unwrap();
        ir_r += irof(net, &random, &x, k, 7).unwrap();
    }
    let n = n as f64;
    let (le_c, le_o, le_r, ir_c, ir_r) = (le_c / n, le_o / n, le_r / n, ir_c / n, ir_r / n);

    let constant = Network::new(
        vec![
            LayerSpec::conv2d("id", Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), None, [1, 1], [0, 0]),
            LayerSpec::flatten("f"),
            LayerSpec::dense(
                "fc",
                Tensor::zeros(vec![10, 784]),
                Some(Tensor::new(vec![10], (0..10).map(|v| v as f32 * 0.1).collect()).unwrap()),
            ),
        ],
        vec![1, 28, 28],
        10,
        None,
    )
    .unwrap();
    let flat = irof(&constant, &RandomExplainer::new(&constant, SEED), &test.images.select(&[0]), 3, 7).unwrap();

    (
        Outcome {
            id: 6,
            name: "stability metric ordering",
            pass: le_c < le_o && le_c < le_r,
            detail: format!("mean LE on 50 test images: causal {le_c:.4} < occlusion {le_o:.4} and < random {le_r:.4}"),
        },
        Outcome {
            id: 7,
            name: "faithfulness ordering",
            pass: ir_c > ir_r && flat == 0.0,
            detail: format!(
                "mean IROF on 50 test images: causal {ir_c:.4} > random {ir_r:.4}; constant-output model IROF = {flat}"
            ),
        },
    )
}

fn determinism(net: &Network, val: &ceg_core::io::LabeledDataset, cfg: &TestConfig) -> Outcome {
    let xk = val.filter_by_class(3, 10).unwrap();
    let policy = InterventionPolicy::continuous(0.25, 0.01).unwrap();
    let run = |workers: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| {
            let (g, d) = infer_graph(net, &xk.images, 3, &policy, cfg, 42).unwrap();
            graph_to_json(&g, &d, Some(&serde_json::json!({ "seed": 42 })))
        })
    };
    let outputs = [run(1), run(1), run(8), run(8)];
    let same = outputs.iter().all(|o| o == &outputs[0]);
    Outcome {
        id: 9,
        name: "determinism",
        pass: same,
        detail: format!(
            "graph JSON ({} bytes) byte-identical across 2 runs each at 1 and 8 workers: {same}",
            outputs[0].len()
        ),
    }
}

fn repair(
    net: &Network,
    val: &ceg_core::io::LabeledDataset,
    test: &ceg_core::io::LabeledDataset,
    cfg: &TestConfig,
) -> Outcome {
    let fractions = [0.0, 0.1, 0.25, 0.5, 1.0];
    let mut ok = true;
    let mut improved = Vec::new();
    let mut hard_total = 0;
    for k in 0..10 {
        let xk = val.filter_by_class(k, 10).unwrap();
        let (_, d) = infer_graph(net, &xk.images, k, &InterventionPolicy::binary(), cfg, SEED).unwrap();
        let table = repair_eval(net, &d, test, k, &fractions).unwrap();
        let first = &table.rows[0];
        ok &= table.rows.len() >= 3;
        ok &= table.easy_count == 0 || first.easy == Some(1.0);
        ok &= table.hard_count == 0 || first.hard == Some(0.0);
        hard_total += table.hard_count;
        if let Some(best) = table.rows.iter().filter_map(|r| r.hard).reduce(f64::max) {
            if best > 0.0 {
                improved.push(format!("{k}:{best:.2}"));
            }
        }
    }
    Outcome {
        id: 10,
        name: "repair",
        pass: ok,
        detail: format!(
            "{} fractions per digit; easy@0 = 100%, hard@0 = 0% for all digits: {ok}; {hard_total} hard samples, best hard accuracy > 0 for digits [{}] (not gated)",
            fractions.len(),
            improved.join(" ")
        ),
    }
}
