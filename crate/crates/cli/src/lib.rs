//! The `ceg` command line: graph inference, stability studies, saliency
//! explanations and metric evaluation over a CEGM model and IDX data.

use std::fs;
use std::path::{Path, PathBuf};

use ceg_core::causal::{NodeKind, TestConfig};
use ceg_core::explain::{
    aggregate_saliency, default_explain_layer, find_peaks, map_to_csv, map_to_pgm, occlusion_baseline,
    top1_filter_response, SaliencyMap,
};
use ceg_core::graph::{
    ate_heatmap_csv, graph_from_json, graph_to_dot, graph_to_json, infer_graph, stability_study, CausalGraph,
    NoisyRegistry,
};
use ceg_core::intervention::{InterventionMode, InterventionPolicy, DEFAULT_EPSILON};
use ceg_core::io::{self, LabeledDataset};
use ceg_core::metrics::{
    argmax, fidelity_curve, irof_report, lipschitz_report, random_mask_curve, repair_eval, CausalExplainer,
    Explainer, MetricReport, OcclusionExplainer, RandomExplainer,
};
use ceg_core::Network;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

pub const TOOL: &str = "ceg";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKERS_ENV: &str = "CEG_WORKERS";
pub const DEFAULT_FRACTIONS: &str = "0.05,0.1,0.2,0.5,1.0";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or inconsistent inputs.
    #[error("{0}")]
    Input(String),
    /// A result broke a guarantee the library makes.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<ceg_core::Error> for CliError {
    fn from(e: ceg_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Invariant(what()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ceg", version, about = "Causal explanatory graphs for feed-forward vision networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Top-1 accuracy of the model on a labelled set.
    Predict(DataArgs),
    /// Infer the causal graph of one class.
    Graph(GraphArgs),
    /// Repeat graph inference under continuous interventions.
    Stability(StabilityArgs),
    /// Saliency map and peaks for one input.
    Explain(ExplainArgs),
    /// Score explanations or graph masking on an evaluation set.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CEGM model file.
    #[arg(long)]
    pub model: PathBuf,
    /// IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Pixel values are divided by this on load.
    #[arg(long, default_value_t = 255.0)]
    pub divide: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Args)]
pub struct InferenceArgs {
    /// Target class.
    #[arg(long = "class")]
    pub class_id: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Minimum number of class samples for the significance test.
    #[arg(long, default_value_t = 30)]
    pub min_samples: usize,
    #[arg(long, value_enum, default_value_t = BetaMode::Binary)]
    pub beta_mode: BetaMode,
    /// Centre of the continuous draw.
    #[arg(long, default_value_t = 0.5)]
    pub beta_b: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Number of inference runs, at least 10.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub b_lo: f64,
    #[arg(long, default_value_t = 0.5)]
    pub b_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    Causal,
    Occlusion,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    /// Images and labels hold the input to explain; without `--graph` the
    /// graph is inferred from their class slice.
    #[command(flatten)]
    pub data: DataArgs,
    /// Index of the input in the image file.
    #[arg(long)]
    pub index: usize,
    /// Class to explain; defaults to the input's label.
    #[arg(long = "class")]
    pub class_id: Option<usize>,
    #[arg(long, value_enum, default_value_t = ExplainerKind::Causal)]
    pub explainer: ExplainerKind,
    /// Parent layer of the causal explanation; defaults to the last conv layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Graph JSON written by `ceg graph`.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = BetaMode::Binary)]
    pub beta_mode: BetaMode,
    #[arg(long, default_value_t = 0.5)]
    pub beta_b: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Irof,
    Le,
    Fidelity,
    Repair,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Inference set: used to infer the graph when `--graph` is absent.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub metric: Metric,
    #[arg(long)]
    pub eval_images: PathBuf,
    #[arg(long)]
    pub eval_labels: PathBuf,
    #[arg(long = "class")]
    pub class_id: usize,
    #[arg(long, value_enum, default_value_t = ExplainerKind::Causal)]
    pub explainer: ExplainerKind,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Comma-separated fractions for fidelity and repair.
    #[arg(long, default_value = DEFAULT_FRACTIONS)]
    pub fractions: String,
    /// IROF patch grid per side.
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    /// Perturbations per input for the Lipschitz estimate.
    #[arg(long, default_value_t = 10)]
    pub m_runs: usize,
    /// Gaussian noise level; defaults to a tenth of each input's range.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Maximum number of class samples scored by irof and le.
    #[arg(long, default_value_t = 50)]
    pub limit: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = BetaMode::Binary)]
    pub beta_mode: BetaMode,
    #[arg(long, default_value_t = 0.5)]
    pub beta_b: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Comma-separated fractions in `[0, 1]`.
pub fn parse_fractions(s: &str) -> std::result::Result<Vec<f64>, String> {
    let out = s
        .split(',')
        .map(|part| {
            let part = part.trim();
            let f: f64 = part.parse().map_err(|_| format!("not a number: {part:?}"))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("fraction {f} outside [0, 1]"));
            }
            Ok(f)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err("no fractions given".into());
    }
    Ok(out)
}

/// Worker count from `CEG_WORKERS`; `None` means the rayon default.
pub fn workers_from_env(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Input(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn policy(mode: BetaMode, b: f64, epsilon: f64) -> Result<InterventionPolicy> {
    let p = match mode {
        BetaMode::Binary => InterventionPolicy { epsilon, ..InterventionPolicy::binary() },
        BetaMode::Continuous => InterventionPolicy::continuous(b, epsilon)?,
    };
    Ok(p)
}

fn policy_json(p: &InterventionPolicy) -> Value {
    let mode = match p.mode {
        InterventionMode::Binary => "binary",
        InterventionMode::Continuous => "continuous",
    };
    json!({ "mode": mode, "b": p.b, "epsilon": p.epsilon })
}

fn test_config(alpha: f64, min_samples: usize) -> Result<TestConfig> {
    let cfg = TestConfig { alpha, min_samples };
    cfg.validate()?;
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn data_json(d: &DataArgs) -> Value {
    json!({
        "model": path_str(&d.model),
        "images": path_str(&d.images),
        "labels": path_str(&d.labels),
        "divide": d.divide,
    })
}

/// `{tool, version, command, config, seed}`. The output directory and the
/// worker count are left out: neither changes the results.
fn meta(command: &str, config: Value, seed: Option<u64>) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command,
        "config": config,
        "seed": seed,
    })
}

fn meta_line(meta: &Value) -> String {
    io::canonical_json(meta).expect("meta serializes")
}

/// Pretty JSON with sorted keys and a trailing newline.
fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn with_meta<T: Serialize>(body: &T, meta: &Value) -> Value {
    let mut v = serde_json::to_value(body).expect("body serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.insert("meta".into(), meta.clone());
    }
    v
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn load_model(path: &Path) -> Result<Network> {
    Ok(io::load_model(path)?)
}

fn load_data(images: &Path, labels: &Path, divide: f64) -> Result<LabeledDataset> {
    let ds = io::load_idx(images, labels, divide)?;
    if ds.is_empty() {
        return Err(CliError::Input(format!("EmptyClass: {} holds no samples", images.display())));
    }
    Ok(ds)
}

fn check_class(net: &Network, k: usize) -> Result<()> {
    if k >= net.num_classes() {
        return Err(ceg_core::Error::ClassOutOfRange { class: k, num_classes: net.num_classes() }.into());
    }
    Ok(())
}

fn check_graph(g: &CausalGraph, d: &NoisyRegistry) -> Result<()> {
    for l in &g.layers {
        for dec in &l.decisions {
            let significant = dec.p < g.alpha;
            let expected = match (significant, dec.mean_te) {
                (true, m) if m < 0.0 => NodeKind::Critical,
                (true, m) if m > 0.0 => NodeKind::Noisy,
                _ => NodeKind::Neutral,
            };
            ensure(dec.kind == expected && (0.0..=1.0).contains(&dec.p), || {
                format!("layer {} node {} has kind {:?} with p={} mean={}", l.layer, dec.node, dec.kind, dec.p, dec.mean_te)
            })?;
        }
    }
    let noisy: usize = g.layers.iter().map(|l| l.noisy().len()).sum();
    ensure(noisy == d.total(), || format!("noisy registry holds {} nodes, graph {noisy}", d.total()))
}

fn check_map(map: &SaliencyMap) -> Result<()> {
    ensure(map.values.iter().all(|v| (0.0..=1.0).contains(v)), || "saliency value outside [0, 1]".into())
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Predict(a) => predict(&a),
        Command::Graph(a) => graph(&a),
        Command::Stability(a) => stability(&a),
        Command::Explain(a) => explain(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn predict(a: &DataArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let ds = load_data(&a.images, &a.labels, a.divide)?;
    let logits = net.forward(&ds.images)?;
    let correct = (0..ds.len()).filter(|&i| argmax(logits.item(i)) == ds.labels[i]).count();
    let accuracy = correct as f64 / ds.len() as f64;
    ensure((0.0..=1.0).contains(&accuracy), || format!("accuracy {accuracy}"))?;
    println!("accuracy {accuracy:.4} ({correct}/{})", ds.len());
    Ok(())
}

fn inference_json(i: &InferenceArgs, p: &InterventionPolicy) -> Value {
    json!({
        "class_id": i.class_id,
        "alpha": i.alpha,
        "min_samples": i.min_samples,
        "policy": policy_json(p),
    })
}

fn graph(a: &GraphArgs) -> Result<()> {
    let i = &a.inference;
    let p = policy(i.beta_mode, i.beta_b, i.epsilon)?;
    let cfg = test_config(i.alpha, i.min_samples)?;
    let net = load_model(&a.data.model)?;
    check_class(&net, i.class_id)?;
    let ds = load_data(&a.data.images, &a.data.labels, a.data.divide)?;
    let class = ds.filter_by_class(i.class_id, net.num_classes())?;
    let (g, d) = infer_graph(&net, &class.images, i.class_id, &p, &cfg, i.seed)?;
    check_graph(&g, &d)?;

    let mut config = inference_json(i, &p);
    config["data"] = data_json(&a.data);
    let m = meta("graph", config, Some(i.seed));
    let line = meta_line(&m);
    let written = vec![
        write(&i.out, "graph.json", graph_to_json(&g, &d, Some(&m)))?,
        write(&i.out, "graph.dot", format!("// {line}\n{}", graph_to_dot(&g, &d)))?,
        write(&i.out, "ate_heatmap.csv", format!("# {line}\n{}", ate_heatmap_csv(&g)))?,
    ];
    println!(
        "class {}: {} critical and {} noisy nodes from {} samples",
        g.class_id,
        g.critical_count(),
        d.total(),
        class.len()
    );
    print_written(&written);
    Ok(())
}

fn stability(a: &StabilityArgs) -> Result<()> {
    let i = &a.inference;
    let cfg = test_config(i.alpha, i.min_samples)?;
    let net = load_model(&a.data.model)?;
    check_class(&net, i.class_id)?;
    let ds = load_data(&a.data.images, &a.data.labels, a.data.divide)?;
    let class = ds.filter_by_class(i.class_id, net.num_classes())?;
    let report = stability_study(&net, &class.images, i.class_id, a.runs, (a.b_lo, a.b_hi), i.epsilon, &cfg, i.seed)?;
    ensure(report.nodes.iter().all(|n| n.count <= report.runs), || "node counted more often than runs".into())?;

    let config = json!({
        "class_id": i.class_id,
        "alpha": i.alpha,
        "min_samples": i.min_samples,
        "epsilon": i.epsilon,
        "runs": a.runs,
        "b_lo": a.b_lo,
        "b_hi": a.b_hi,
        "data": data_json(&a.data),
    });
    let m = meta("stability", config, Some(i.seed));
    let path = write(&i.out, "stability_report.json", pretty(&with_meta(&report, &m)))?;
    println!(
        "class {}: {} nodes seen over {} runs, {:.1}% in every run",
        report.class_id,
        report.nodes.len(),
        report.runs,
        report.always_fraction * 100.0
    );
    print_written(&[path]);
    Ok(())
}

/// Graph from `--graph`, or inferred on the class slice of `ds`.
#[allow(clippy::too_many_arguments)]
fn obtain_graph(
    net: &Network,
    graph_path: Option<&Path>,
    ds: Option<&LabeledDataset>,
    k: usize,
    alpha: f64,
    p: &InterventionPolicy,
    seed: u64,
) -> Result<(CausalGraph, NoisyRegistry)> {
    if let Some(path) = graph_path {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let (g, d) = graph_from_json(&text)?;
        if g.class_id != k {
            return Err(CliError::Input(format!(
                "{} holds the graph of class {}, not {k}",
                path.display(),
                g.class_id
            )));
        }
        return Ok((g, d));
    }
    let ds = ds.expect("inference data loaded");
    let class = ds.filter_by_class(k, net.num_classes())?;
    let (g, d) = infer_graph(net, &class.images, k, p, &test_config(alpha, TestConfig::default().min_samples)?, seed)?;
    check_graph(&g, &d)?;
    Ok((g, d))
}

fn graph_source_json(graph: Option<&Path>, alpha: f64, p: &InterventionPolicy) -> Value {
    match graph {
        Some(path) => json!({ "graph": path_str(path) }),
        None => json!({ "alpha": alpha, "policy": policy_json(p) }),
    }
}

fn explain(a: &ExplainArgs) -> Result<()> {
    let p = policy(a.beta_mode, a.beta_b, a.epsilon)?;
    let net = load_model(&a.data.model)?;
    let ds = load_data(&a.data.images, &a.data.labels, a.data.divide)?;
    if a.index >= ds.len() {
        return Err(CliError::Input(format!("index {} out of range for {} samples", a.index, ds.len())));
    }
    let k = a.class_id.unwrap_or(ds.labels[a.index]);
    check_class(&net, k)?;
    let x = ds.images.select(&[a.index]);
    let layer = a.layer.unwrap_or_else(|| default_explain_layer(&net));

    let mut config = json!({
        "class_id": k,
        "index": a.index,
        "explainer": a.explainer,
        "data": data_json(&a.data),
    });
    let mut body = serde_json::Map::new();
    let map = match a.explainer {
        ExplainerKind::Causal => {
            let (g, _) = obtain_graph(&net, a.graph.as_deref(), Some(&ds), k, a.alpha, &p, a.seed)?;
            config["layer"] = json!(layer);
            config["graph_source"] = graph_source_json(a.graph.as_deref(), a.alpha, &p);
            let map = aggregate_saliency(&net, &x, &g, layer)?;
            let filters = top1_filter_response(&net, &x, &g, layer)?;
            let filters: Vec<Value> = filters
                .iter()
                .map(|f| json!({ "parent": f.parent, "child": f.child, "peaks": f.peaks }))
                .collect();
            body.insert("filters".into(), Value::Array(filters));
            map
        }
        ExplainerKind::Occlusion => {
            let o = OcclusionExplainer::new(&net, k);
            config["patch"] = json!(o.patch);
            config["stride"] = json!(o.stride);
            config["fill"] = json!(o.fill);
            occlusion_baseline(&net, &x, k, o.patch, o.stride, o.fill)?
        }
        ExplainerKind::Random => {
            return Err(CliError::Input("explain supports --explainer causal or occlusion".into()));
        }
    };
    check_map(&map)?;
    if map.degenerate {
        eprintln!("warning: saliency map is constant; wrote a zero map");
    }
    let peaks = find_peaks(&map.values, map.height, map.width);
    let m = meta("explain", config, Some(a.seed));
    let line = meta_line(&m);
    body.insert("source".into(), serde_json::to_value(map.source).expect("source serializes"));
    body.insert("degenerate".into(), json!(map.degenerate));
    body.insert("height".into(), json!(map.height));
    body.insert("width".into(), json!(map.width));
    body.insert("peaks".into(), serde_json::to_value(&peaks).expect("peaks serialize"));
    body.insert("meta".into(), m);

    let written = vec![
        write(&a.out, "saliency.pgm", map_to_pgm(&map, &line))?,
        write(&a.out, "saliency.csv", format!("# {line}\n{}", map_to_csv(&map)))?,
        write(&a.out, "peaks.json", pretty(&Value::Object(body)))?,
    ];
    println!(
        "class {k}, input {}: {} peaks, maximum at ({}, {})",
        a.index,
        peaks.peaks.len(),
        peaks.absolute_max.row,
        peaks.absolute_max.col
    );
    print_written(&written);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let p = policy(a.beta_mode, a.beta_b, a.epsilon)?;
    let fractions = parse_fractions(&a.fractions).map_err(|e| CliError::Input(format!("--fractions: {e}")))?;
    if a.grid == 0 {
        return Err(CliError::Input("--grid must be positive".into()));
    }
    let net = load_model(&a.data.model)?;
    check_class(&net, a.class_id)?;
    let k = a.class_id;
    let eval_set = load_data(&a.eval_images, &a.eval_labels, a.data.divide)?;
    let needs_graph = matches!(a.metric, Metric::Fidelity | Metric::Repair) || a.explainer == ExplainerKind::Causal;
    let inference = if needs_graph && a.graph.is_none() {
        Some(load_data(&a.data.images, &a.data.labels, a.data.divide)?)
    } else {
        None
    };
    let graph = if needs_graph {
        Some(obtain_graph(&net, a.graph.as_deref(), inference.as_ref(), k, a.alpha, &p, a.seed)?)
    } else {
        None
    };
    let layer = a.layer.unwrap_or_else(|| default_explain_layer(&net));

    let mut config = json!({
        "metric": a.metric,
        "class_id": k,
        "data": data_json(&a.data),
        "eval_images": path_str(&a.eval_images),
        "eval_labels": path_str(&a.eval_labels),
    });
    if needs_graph {
        config["graph_source"] = graph_source_json(a.graph.as_deref(), a.alpha, &p);
    }

    let class = eval_set.filter_by_class(k, net.num_classes())?;
    let (report, detail_csv, detail) = match a.metric {
        Metric::Irof | Metric::Le => {
            let n = class.len().min(a.limit);
            if n == 0 {
                return Err(CliError::Input("--limit must be positive".into()));
            }
            let images = class.images.select(&(0..n).collect::<Vec<_>>());
            let explainer: Box<dyn Explainer + '_> = match a.explainer {
                ExplainerKind::Causal => {
                    let g = &graph.as_ref().expect("graph").0;
                    Box::new(CausalExplainer { net: &net, graph: g, layer })
                }
                ExplainerKind::Occlusion => Box::new(OcclusionExplainer::new(&net, k)),
                ExplainerKind::Random => Box::new(RandomExplainer::new(&net, a.seed)),
            };
            config["explainer"] = json!(a.explainer);
            config["samples"] = json!(n);
            if a.explainer == ExplainerKind::Causal {
                config["layer"] = json!(layer);
            }
            let report = if a.metric == Metric::Irof {
                config["grid"] = json!(a.grid);
                let r = irof_report(&net, explainer.as_ref(), &images, k, a.grid)?;
                ensure(r.per_sample.iter().all(|v| (0.0..=1.0).contains(v)), || "IROF outside [0, 1]".into())?;
                r
            } else {
                config["m_runs"] = json!(a.m_runs);
                config["sigma"] = json!(a.sigma);
                let r = lipschitz_report(explainer.as_ref(), &images, a.sigma, a.m_runs, a.seed)?;
                ensure(r.per_sample.iter().all(|v| *v >= 0.0 && v.is_finite()), || "negative or non-finite LE".into())?;
                r
            };
            let csv = report.to_csv();
            (report, csv, Value::Null)
        }
        Metric::Fidelity => {
            let positive: Vec<f64> = fractions.iter().copied().filter(|f| *f > 0.0).collect();
            if positive.len() != fractions.len() {
                return Err(CliError::Input("fidelity fractions must be positive".into()));
            }
            let g = &graph.as_ref().expect("graph").0;
            let critical = fidelity_curve(&net, g, &class.images, k, &fractions)?;
            let random = random_mask_curve(&net, g, &class.images, k, &fractions, a.seed)?;
            config["fractions"] = json!(fractions);
            let mut csv = String::from("fraction,accuracy,masked_count,random_accuracy,random_masked_count\n");
            for (c, r) in critical.iter().zip(&random) {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.fraction, c.accuracy, c.masked_count, r.accuracy, r.masked_count
                ));
            }
            let report = MetricReport::new("fidelity", critical.iter().map(|c| c.accuracy).collect(), config.clone());
            (report, csv, json!({ "critical": critical, "random": random }))
        }
        Metric::Repair => {
            let d = &graph.as_ref().expect("graph").1;
            let table = repair_eval(&net, d, &eval_set, k, &fractions)?;
            config["fractions"] = json!(fractions);
            let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            let mut csv = String::from("fraction,masked_count,easy,hard\n");
            for r in &table.rows {
                csv.push_str(&format!("{},{},{},{}\n", r.fraction, r.masked_count, cell(r.easy), cell(r.hard)));
            }
            // Scores are the hard-split accuracies; empty when that split is.
            let hard: Vec<f64> = table.rows.iter().filter_map(|r| r.hard).collect();
            let report = MetricReport::new("repair", hard, config.clone());
            (report, csv, serde_json::to_value(&table).expect("table serializes"))
        }
    };
    let mut report = report;
    report.config = config.clone();
    let m = meta("eval", config, Some(a.seed));
    let line = meta_line(&m);
    let name = match a.metric {
        Metric::Irof => "irof",
        Metric::Le => "le",
        Metric::Fidelity => "fidelity",
        Metric::Repair => "repair",
    };
    let mut doc = with_meta(&report, &m);
    if !detail.is_null() {
        doc["detail"] = detail;
    }
    let written = vec![
        write(&a.out, &format!("{name}_report.json"), pretty(&doc))?,
        write(&a.out, &format!("{name}.csv"), format!("# {line}\n{detail_csv}"))?,
    ];
    println!("{name}: mean {:.4} over {} scores", report.mean, report.per_sample.len());
    print_written(&written);
    Ok(())
}

/// Runs `f` on a pool of `workers` threads, or directly for the default.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Input(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
