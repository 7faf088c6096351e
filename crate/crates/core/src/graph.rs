//! Top-down inference of per-class causal explanatory graphs.
//!
//! Starting from the class node `k` of the output layer, every parent node of
//! layer `L - 1` is tested against `{k}`. The critical nodes found there
//! become the targets for layer `L - 2`, and so on down to layer 1. Noisy
//! nodes are collected separately in a [`NoisyRegistry`]. If a layer yields
//! no critical node, the descent stops and the layers below are recorded as
//! empty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{classify_layer_with, ClassContext, NodeDecision, NodeKind, TestConfig};
use crate::error::{Error, Result};
use crate::intervention::InterventionPolicy;
use crate::nn::Network;
use crate::tensor::Tensor;

/// Nodes of graph layer `layer` and the layer-`layer + 1` targets they were
/// tested against.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayer {
    pub layer: usize,
    /// `false` when the descent stopped above this layer.
    pub evaluated: bool,
    pub targets: Vec<usize>,
    /// Decision for every parent node, ordered by node index.
    pub decisions: Vec<NodeDecision>,
}

impl GraphLayer {
    fn of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &NodeDecision> {
        self.decisions.iter().filter(move |d| d.kind == kind)
    }

    pub fn critical(&self) -> Vec<NodeDecision> {
        self.of_kind(NodeKind::Critical).copied().collect()
    }

    pub fn noisy(&self) -> Vec<NodeDecision> {
        self.of_kind(NodeKind::Noisy).copied().collect()
    }

    pub fn critical_nodes(&self) -> Vec<usize> {
        self.of_kind(NodeKind::Critical).map(|d| d.node).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    pub class_id: usize,
    pub alpha: f64,
    pub policy: InterventionPolicy,
    /// Index `L` of the output layer.
    pub output_layer: usize,
    /// Layers `L - 1` down to `1`.
    pub layers: Vec<GraphLayer>,
    /// Mean class logit of the unmodified network over the inference set.
    pub baseline_logit_mean: f64,
    /// Number of per-input treatment effects computed.
    pub te_evaluations: usize,
}

impl CausalGraph {
    pub fn layer(&self, l: usize) -> Option<&GraphLayer> {
        self.layers.iter().find(|g| g.layer == l)
    }

    /// Critical nodes of layer `l`; the output layer holds the class node.
    pub fn critical_nodes(&self, l: usize) -> Vec<usize> {
        if l == self.output_layer {
            return vec![self.class_id];
        }
        self.layer(l).map(GraphLayer::critical_nodes).unwrap_or_default()
    }

    pub fn decision(&self, l: usize, node: usize) -> Option<&NodeDecision> {
        self.layer(l)?.decisions.iter().find(|d| d.node == node)
    }

    /// Edges `(parent, child)` from critical nodes of `l` to the targets they
    /// were tested against.
    pub fn edges(&self, l: usize) -> Vec<(usize, usize)> {
        let Some(layer) = self.layer(l) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for j in layer.critical_nodes() {
            for &t in &layer.targets {
                out.push((j, t));
            }
        }
        out
    }

    pub fn critical_count(&self) -> usize {
        self.layers.iter().map(|l| l.critical_nodes().len()).sum()
    }
}

/// Noisy nodes per layer, with the targets they were tested against.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRegistry {
    pub class_id: usize,
    pub layers: Vec<NoisyLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLayer {
    pub layer: usize,
    pub targets: Vec<usize>,
    pub noisy: Vec<NodeDecision>,
}

impl NoisyRegistry {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.noisy.len()).sum()
    }
}

pub fn infer_graph(
    net: &Network,
    images: &Tensor,
    k: usize,
    policy: &InterventionPolicy,
    cfg: &TestConfig,
    seed: u64,
) -> Result<(CausalGraph, NoisyRegistry)> {
    let ctx = ClassContext::new(net, images, k)?;
    infer_graph_with(&ctx, policy, cfg, seed)
}

pub fn infer_graph_with(
    ctx: &ClassContext<'_>,
    policy: &InterventionPolicy,
    cfg: &TestConfig,
    seed: u64,
) -> Result<(CausalGraph, NoisyRegistry)> {
    policy.validate()?;
    cfg.validate()?;
    let net = ctx.net();
    let k = ctx.class_id();
    let top = net.graph_layers();
    let evaluations = AtomicUsize::new(0);

    let mut layers = Vec::with_capacity(top.saturating_sub(1));
    let mut targets = vec![k];
    for l in (1..top).rev() {
        if targets.is_empty() {
            layers.push(GraphLayer {
                layer: l,
                evaluated: false,
                targets: Vec::new(),
                decisions: Vec::new(),
            });
            continue;
        }
        let decisions = classify_layer_with(ctx, l, &targets, policy, cfg, seed, &evaluations)?;
        let layer = GraphLayer {
            layer: l,
            evaluated: true,
            targets: targets.clone(),
            decisions,
        };
        targets = layer.critical_nodes();
        layers.push(layer);
    }

    let base = ctx.baseline();
    let graph = CausalGraph {
        class_id: k,
        alpha: cfg.alpha,
        policy: *policy,
        output_layer: top,
        baseline_logit_mean: base.iter().sum::<f64>() / base.len() as f64,
        te_evaluations: evaluations.load(Ordering::Relaxed),
        layers,
    };
    let registry = NoisyRegistry {
        class_id: k,
        layers: graph
            .layers
            .iter()
            .map(|g| NoisyLayer {
                layer: g.layer,
                targets: g.targets.clone(),
                noisy: g.noisy(),
            })
            .collect(),
    };
    Ok((graph, registry))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFrequency {
    pub layer: usize,
    pub node: usize,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub class_id: usize,
    pub runs: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Centre `b` of the intervention draw, one entry per block of 10 runs.
    pub b_schedule: Vec<f64>,
    /// Every critical node that appeared in at least one run.
    pub nodes: Vec<NodeFrequency>,
    /// Share of `nodes` whose frequency falls in `(i/10, (i+1)/10]`.
    pub histogram: Vec<f64>,
    /// Share of `nodes` appearing in every run.
    pub always_fraction: f64,
}

impl StabilityReport {
    /// Share of ever-appearing nodes with frequency at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        if self.nodes.is_empty() {
            return 1.0;
        }
        let hits = self.nodes.iter().filter(|n| n.frequency >= threshold).count();
        hits as f64 / self.nodes.len() as f64
    }
}

pub const RUNS_PER_B: usize = 10;

/// Centres of `ceil(runs / 10)` equal bins spanning `(lo, hi)`, ascending.
pub fn b_schedule(runs: usize, lo: f64, hi: f64) -> Vec<f64> {
    let blocks = runs.div_ceil(RUNS_PER_B);
    (0..blocks)
        .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / blocks as f64)
        .collect()
}

/// Repeats graph inference under continuous interventions whose centre `b`
/// ascends every 10 runs, and reports how often each critical node appears.
/// Run `r` uses seed `seed + r`.
#[allow(clippy::too_many_arguments)]
pub fn stability_study(
    net: &Network,
    images: &Tensor,
    k: usize,
    runs: usize,
    b_range: (f64, f64),
    epsilon: f64,
    cfg: &TestConfig,
    seed: u64,
) -> Result<StabilityReport> {
    if runs < RUNS_PER_B {
        return Err(Error::InvalidArgument(format!(
            "stability study needs at least {RUNS_PER_B} runs, got {runs}"
        )));
    }
    let (lo, hi) = b_range;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "b range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
        )));
    }
    let schedule = b_schedule(runs, lo, hi);
    let policies = schedule
        .iter()
        .map(|&b| InterventionPolicy::continuous(b, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let ctx = ClassContext::new(net, images, k)?;

    let graphs: Vec<CausalGraph> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let policy = &policies[r / RUNS_PER_B];
            infer_graph_with(&ctx, policy, cfg, seed.wrapping_add(r as u64)).map(|(g, _)| g)
        })
        .collect::<Result<_>>()?;

    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for g in &graphs {
        for layer in &g.layers {
            for j in layer.critical_nodes() {
                *counts.entry((layer.layer, j)).or_default() += 1;
            }
        }
    }
    let nodes: Vec<NodeFrequency> = counts
        .into_iter()
        .map(|((layer, node), count)| NodeFrequency {
            layer,
            node,
            count,
            frequency: count as f64 / runs as f64,
        })
        .collect();
    let mut histogram = vec![0.0; 10];
    for n in &nodes {
        let bin = ((n.count * 10).div_ceil(runs)).clamp(1, 10) - 1;
        histogram[bin] += 1.0;
    }
    let total = nodes.len().max(1) as f64;
    histogram.iter_mut().for_each(|h| *h /= total);
    let always_fraction = if nodes.is_empty() {
        1.0
    } else {
        nodes.iter().filter(|n| n.count == runs).count() as f64 / total
    };

    Ok(StabilityReport {
        class_id: k,
        runs,
        seed,
        epsilon,
        b_schedule: schedule,
        nodes,
        histogram,
        always_fraction,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: usize,
    pub mean_te: f64,
    pub std_te: f64,
    #[serde(with = "z_repr")]
    pub z: f64,
    pub p: f64,
}

impl From<&NodeDecision> for NodeStats {
    fn from(d: &NodeDecision) -> Self {
        Self {
            node: d.node,
            mean_te: d.mean_te,
            std_te: d.std_te,
            z: d.z,
            p: d.p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub layer: usize,
    pub critical: Vec<NodeStats>,
    pub noisy: Vec<NodeStats>,
    pub targets: Vec<usize>,
}

/// On-disk JSON form of a graph and its noisy registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub class_id: usize,
    pub alpha: f64,
    pub policy: InterventionPolicy,
    pub output_layer: usize,
    pub layers: Vec<LayerDocument>,
}

impl GraphDocument {
    pub fn new(g: &CausalGraph, d: &NoisyRegistry) -> Self {
        let layers = g
            .layers
            .iter()
            .map(|layer| {
                let noisy = d
                    .layers
                    .iter()
                    .find(|n| n.layer == layer.layer)
                    .map(|n| n.noisy.iter().map(NodeStats::from).collect())
                    .unwrap_or_default();
                LayerDocument {
                    layer: layer.layer,
                    critical: layer.critical().iter().map(NodeStats::from).collect(),
                    noisy,
                    targets: layer.targets.clone(),
                }
            })
            .collect();
        Self {
            class_id: g.class_id,
            alpha: g.alpha,
            policy: g.policy,
            output_layer: g.output_layer,
            layers,
        }
    }

    /// Rebuilds the graph and registry. Neutral nodes are not stored, so the
    /// rebuilt layers hold critical and noisy decisions only.
    pub fn into_graph(self) -> (CausalGraph, NoisyRegistry) {
        let to_decision = |s: &NodeStats, kind| NodeDecision {
            node: s.node,
            mean_te: s.mean_te,
            std_te: s.std_te,
            z: s.z,
            p: s.p,
            kind,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut noisy_layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut decisions: Vec<NodeDecision> = l
                .critical
                .iter()
                .map(|s| to_decision(s, NodeKind::Critical))
                .chain(l.noisy.iter().map(|s| to_decision(s, NodeKind::Noisy)))
                .collect();
            decisions.sort_by_key(|d| d.node);
            layers.push(GraphLayer {
                layer: l.layer,
                evaluated: !l.targets.is_empty(),
                targets: l.targets.clone(),
                decisions,
            });
            noisy_layers.push(NoisyLayer {
                layer: l.layer,
                targets: l.targets.clone(),
                noisy: l.noisy.iter().map(|s| to_decision(s, NodeKind::Noisy)).collect(),
            });
        }
        (
            CausalGraph {
                class_id: self.class_id,
                alpha: self.alpha,
                policy: self.policy,
                output_layer: self.output_layer,
                layers,
                baseline_logit_mean: f64::NAN,
                te_evaluations: 0,
            },
            NoisyRegistry {
                class_id: self.class_id,
                layers: noisy_layers,
            },
        )
    }
}

/// Pretty JSON with sorted keys. `meta`, when given, is stored under `"meta"`.
pub fn graph_to_json(g: &CausalGraph, d: &NoisyRegistry, meta: Option<&serde_json::Value>) -> String {
    let mut value = serde_json::to_value(GraphDocument::new(g, d)).expect("graph serializes");
    if let (Some(meta), Some(obj)) = (meta, value.as_object_mut()) {
        obj.insert("meta".into(), meta.clone());
    }
    serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
}

pub fn graph_from_json(text: &str) -> Result<(CausalGraph, NoisyRegistry)> {
    let doc: GraphDocument =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(doc.into_graph())
}

/// Graphviz rendering: one cluster per layer, critical nodes filled, noisy
/// nodes dashed, edges from critical nodes to their targets.
pub fn graph_to_dot(g: &CausalGraph, d: &NoisyRegistry) -> String {
    let id = |l: usize, n: usize| format!("l{l}_n{n}");
    let mut out = String::new();
    let _ = writeln!(out, "digraph causal_graph_class_{} {{", g.class_id);
    let _ = writeln!(out, "  rankdir=BT;");
    let _ = writeln!(out, "  node [shape=circle, fontsize=10];");
    let _ = writeln!(out, "  subgraph cluster_l{} {{", g.output_layer);
    let _ = writeln!(out, "    label=\"layer {} (output)\";", g.output_layer);
    let _ = writeln!(
        out,
        "    {} [label=\"{}\", style=filled, fillcolor=\"#d62728\", shape=doublecircle];",
        id(g.output_layer, g.class_id),
        g.class_id
    );
    let _ = writeln!(out, "  }}");
    for layer in &g.layers {
        let _ = writeln!(out, "  subgraph cluster_l{} {{", layer.layer);
        let _ = writeln!(out, "    label=\"layer {}\";", layer.layer);
        for j in layer.critical_nodes() {
            let _ = writeln!(
                out,
                "    {} [label=\"{j}\", style=filled, fillcolor=\"#d62728\"];",
                id(layer.layer, j)
            );
        }
        if let Some(noisy) = d.layers.iter().find(|n| n.layer == layer.layer) {
            for n in &noisy.noisy {
                let _ = writeln!(
                    out,
                    "    {} [label=\"{}\", style=dashed];",
                    id(layer.layer, n.node),
                    n.node
                );
            }
        }
        let _ = writeln!(out, "  }}");
    }
    for layer in &g.layers {
        for (j, t) in g.edges(layer.layer) {
            let _ = writeln!(out, "  {} -> {};", id(layer.layer, j), id(layer.layer + 1, t));
        }
    }
    out.push_str("}\n");
    out
}

/// Mean treatment effect divided by the mean baseline class logit.
pub fn relative_ate(g: &CausalGraph, d: &NodeDecision) -> f64 {
    if g.baseline_logit_mean.is_finite() && g.baseline_logit_mean != 0.0 {
        d.mean_te / g.baseline_logit_mean.abs()
    } else {
        d.mean_te
    }
}

/// ATE heatmap: one row per node index, one column per tested layer
/// (ascending). Cells are [`relative_ate`]; empty where the layer has no such
/// node or was not evaluated.
pub fn ate_heatmap_csv(g: &CausalGraph) -> String {
    let mut layers: Vec<&GraphLayer> = g.layers.iter().collect();
    layers.sort_by_key(|l| l.layer);
    let rows = layers.iter().map(|l| l.decisions.len()).max().unwrap_or(0);
    let mut out = String::from("node");
    for l in &layers {
        let _ = write!(out, ",layer{}", l.layer);
    }
    out.push('\n');
    for node in 0..rows {
        let _ = write!(out, "{node}");
        for l in &layers {
            out.push(',');
            if let Some(d) = l.decisions.iter().find(|d| d.node == node) {
                let _ = write!(out, "{}", relative_ate(g, d));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
}

pub fn export_graph(
    g: &CausalGraph,
    d: &NoisyRegistry,
    format: GraphFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        GraphFormat::Json => graph_to_json(g, d, None),
        GraphFormat::Dot => graph_to_dot(g, d),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

mod z_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid z value {t:?}"))),
        }
    }
}
