//! Evaluation of explanations and of graph-guided masking.
//!
//! Lipschitz estimates and IROF score explainers; fidelity curves and repair
//! tables mask path groups of a [`CausalGraph`] or [`NoisyRegistry`] with
//! `beta = 0` through a [`NetworkView`], so the base network is never
//! modified.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::NodeDecision;
use crate::error::{Error, Result};
use crate::explain::{aggregate_saliency, default_explain_layer, occlusion_baseline};
use crate::graph::{CausalGraph, NoisyRegistry};
use crate::intervention::{NetworkView, PathGroup};
use crate::io::LabeledDataset;
use crate::nn::Network;
use crate::tensor::Tensor;

/// An attribution method bound to one class. `attribute` takes a single
/// input `[1] ++ input_shape` and returns one value per input pixel.
pub trait Explainer: Sync {
    fn name(&self) -> &str;
    fn attribute(&self, x: &Tensor) -> Result<Vec<f32>>;
}

/// Aggregate saliency at a fixed layer of a graph inferred beforehand.
pub struct CausalExplainer<'a> {
    pub net: &'a Network,
    pub graph: &'a CausalGraph,
    pub layer: usize,
}

impl<'a> CausalExplainer<'a> {
    pub fn new(net: &'a Network, graph: &'a CausalGraph) -> Self {
        Self {
            net,
            graph,
            layer: default_explain_layer(net),
        }
    }
}

impl Explainer for CausalExplainer<'_> {
    fn name(&self) -> &str {
        "causal"
    }

    fn attribute(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(aggregate_saliency(self.net, x, self.graph, self.layer)?.values)
    }
}

pub struct OcclusionExplainer<'a> {
    pub net: &'a Network,
    pub class_id: usize,
    pub patch: (usize, usize),
    pub stride: (usize, usize),
    pub fill: f32,
}

impl<'a> OcclusionExplainer<'a> {
    /// 4x4 zero-filled patches every 2 pixels.
    pub fn new(net: &'a Network, class_id: usize) -> Self {
        Self {
            net,
            class_id,
            patch: (4, 4),
            stride: (2, 2),
            fill: 0.0,
        }
    }
}

impl Explainer for OcclusionExplainer<'_> {
    fn name(&self) -> &str {
        "occlusion"
    }

    fn attribute(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(occlusion_baseline(self.net, x, self.class_id, self.patch, self.stride, self.fill)?.values)
    }
}

/// Uniform noise in `[0, 1)`, seeded from `seed` and the input bytes: the
/// same input always gets the same map, a perturbed one an unrelated map.
pub struct RandomExplainer {
    pub seed: u64,
    pub pixels: usize,
}

impl RandomExplainer {
    pub fn new(net: &Network, seed: u64) -> Self {
        let s = net.input_shape();
        let pixels = if s.len() == 3 { s[1] * s[2] } else { s.iter().product() };
        Self { seed, pixels }
    }
}

impl Explainer for RandomExplainer {
    fn name(&self) -> &str {
        "random"
    }

    fn attribute(&self, x: &Tensor) -> Result<Vec<f32>> {
        use rand::Rng;
        // FNV-1a over the raw input bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in x.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ h);
        Ok((0..self.pixels).map(|_| rng.random::<f32>()).collect())
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `0.1 * (max - min)` of the input, or 0.1 for a constant input.
pub fn default_noise_sigma(x: &Tensor) -> f64 {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo) as f64;
    if range > 0.0 {
        0.1 * range
    } else {
        0.1
    }
}

/// Largest `||e(x) - e(x')|| / ||x - x'||` over `m_runs` Gaussian
/// perturbations `x' = x + N(0, sigma^2)`.
pub fn lipschitz_estimate(
    explainer: &dyn Explainer,
    x: &Tensor,
    sigma: f64,
    m_runs: usize,
    seed: u64,
) -> Result<f64> {
    if m_runs == 0 {
        return Err(Error::InvalidArgument("m_runs must be at least 1".into()));
    }
    let noise = Normal::new(0.0, sigma)
        .ok()
        .filter(|_| sigma > 0.0)
        .ok_or_else(|| Error::InvalidArgument(format!("noise sigma must be positive, got {sigma}")))?;
    let reference = explainer.attribute(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<f64> = None;
    for _ in 0..m_runs {
        let data: Vec<f32> = x.data().iter().map(|v| v + noise.sample(&mut rng) as f32).collect();
        let dx = l2(&data, x.data());
        if dx < 1e-12 {
            continue;
        }
        let perturbed = Tensor::new(x.shape().to_vec(), data)?;
        let ratio = l2(&explainer.attribute(&perturbed)?, &reference) / dx;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or(Error::AllDrawsDegenerate)
}

/// Row and column bounds of a `grid x grid` partition of an `h x w` plane;
/// leftover pixels join the last row / column of patches.
pub fn patch_grid(h: usize, w: usize, grid: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    if grid == 0 || grid > h || grid > w {
        return Err(Error::InvalidArgument(format!(
            "a {grid}x{grid} grid does not fit a {h}x{w} input"
        )));
    }
    let (ph, pw) = (h / grid, w / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        let r1 = if r + 1 == grid { h } else { (r + 1) * ph };
        for c in 0..grid {
            let c1 = if c + 1 == grid { w } else { (c + 1) * pw };
            out.push((r * ph, r1, c * pw, c1));
        }
    }
    Ok(out)
}

fn softmax_prob(logits: &[f32], k: usize) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom: f64 = logits.iter().map(|v| (*v as f64 - max).exp()).sum();
    (logits[k] as f64 - max).exp() / denom
}

/// Iterative removal of features over a `grid x grid` partition: patches
/// are ranked by mean attribution (row-major on ties) and replaced
/// cumulatively by their per-channel mean. Returns the mean over all steps
/// of `1 - p_t / p_0`, the ratio clipped to `[0, 1]`.
pub fn irof(net: &Network, explainer: &dyn Explainer, x: &Tensor, k: usize, grid: usize) -> Result<f64> {
    let s = net.input_shape();
    if s.len() != 3 || x.shape().len() != 4 || x.shape()[0] != 1 || x.shape()[1..] != s[..] {
        return Err(Error::ShapeMismatch(format!(
            "irof needs one image input [1, C, H, W] matching {s:?}, got {:?}",
            x.shape()
        )));
    }
    if k >= net.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: k,
            num_classes: net.num_classes(),
        });
    }
    let (channels, h, w) = (s[0], s[1], s[2]);
    let patches = patch_grid(h, w, grid)?;
    let attribution = explainer.attribute(x)?;
    if attribution.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "attribution has {} values, expected {}",
            attribution.len(),
            h * w
        )));
    }
    let mean_over = |plane: &[f32], p: &(usize, usize, usize, usize)| -> f64 {
        let mut sum = 0.0;
        for r in p.0..p.1 {
            sum += plane[r * w + p.2..r * w + p.3].iter().map(|v| *v as f64).sum::<f64>();
        }
        sum / ((p.1 - p.0) * (p.3 - p.2)) as f64
    };
    let scores: Vec<f64> = patches.iter().map(|p| mean_over(&attribution, p)).collect();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));

    let base = x.item(0);
    let mut current = base.to_vec();
    let mut batch = Vec::with_capacity(patches.len() * base.len());
    for &p in &order {
        let (r0, r1, c0, c1) = patches[p];
        for ch in 0..channels {
            let plane = &base[ch * h * w..(ch + 1) * h * w];
            let fill = mean_over(plane, &patches[p]) as f32;
            for r in r0..r1 {
                current[ch * h * w + r * w + c0..ch * h * w + r * w + c1].fill(fill);
            }
        }
        batch.extend_from_slice(&current);
    }
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(s);
    let logits = net.forward(&Tensor::new(shape, batch)?)?;
    let p0 = softmax_prob(net.forward(x)?.item(0), k);
    if p0 < 1e-12 {
        return Err(Error::ZeroBaseline(p0));
    }
    let total: f64 = (0..patches.len())
        .map(|t| 1.0 - (softmax_prob(logits.item(t), k) / p0).clamp(0.0, 1.0))
        .sum();
    Ok(total / patches.len() as f64)
}

/// Share of `images` whose top-1 prediction under `view` is `k`.
pub fn class_accuracy(view: &NetworkView<'_>, images: &Tensor, k: usize) -> Result<f64> {
    if images.batch() == 0 {
        return Err(Error::EmptyClass(k));
    }
    let logits = view.forward(images)?;
    let hits = (0..images.batch()).filter(|&i| argmax(logits.item(i)) == k).count();
    Ok(hits as f64 / images.batch() as f64)
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub fraction: f64,
    pub accuracy: f64,
    pub masked_count: usize,
}

/// Nodes to mask per layer, with the targets their path groups use.
type Mask = Vec<(usize, Vec<usize>, Vec<usize>)>;

fn masked_view<'a>(net: &'a Network, mask: &Mask) -> Result<NetworkView<'a>> {
    let mut view = NetworkView::new(net);
    for (l, targets, nodes) in mask {
        for &j in nodes {
            view.intervene(&PathGroup::new(net, *l, j, targets)?, 0.0)?;
        }
    }
    Ok(view)
}

fn check_fractions(fractions: &[f64], allow_zero: bool) -> Result<()> {
    for &f in fractions {
        let ok = if allow_zero { (0.0..=1.0).contains(&f) } else { f > 0.0 && f <= 1.0 };
        if !ok {
            return Err(Error::InvalidArgument(format!("fraction {f} out of range")));
        }
    }
    Ok(())
}

/// `|mean_te|` descending, node index ascending on ties.
fn rank_by_strength(decisions: &[NodeDecision]) -> Vec<usize> {
    let mut d = decisions.to_vec();
    d.sort_by(|a, b| b.mean_te.abs().total_cmp(&a.mean_te.abs()).then(a.node.cmp(&b.node)));
    d.into_iter().map(|d| d.node).collect()
}

fn count_for(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Class-`k` accuracy on `images` after masking, in every graph layer, the
/// `round(fraction * |J^l|)` critical nodes with the largest `|mean_te|`.
pub fn fidelity_curve(
    net: &Network,
    g: &CausalGraph,
    images: &Tensor,
    k: usize,
    fractions: &[f64],
) -> Result<Vec<FidelityPoint>> {
    check_fractions(fractions, false)?;
    fractions
        .iter()
        .map(|&f| {
            let mask: Mask = g
                .layers
                .iter()
                .filter(|l| l.evaluated)
                .map(|l| {
                    let ranked = rank_by_strength(&l.critical());
                    let n = count_for(f, ranked.len());
                    (l.layer, l.targets.clone(), ranked[..n].to_vec())
                })
                .collect();
            masked_point(net, &mask, images, k, f)
        })
        .collect()
}

/// The control for [`fidelity_curve`]: per layer, the same number of nodes
/// drawn at random from the non-critical ones (all of them when there are
/// fewer).
pub fn random_mask_curve(
    net: &Network,
    g: &CausalGraph,
    images: &Tensor,
    k: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<FidelityPoint>> {
    check_fractions(fractions, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut mask: Mask = Vec::new();
        for l in g.layers.iter().filter(|l| l.evaluated) {
            let critical = l.critical_nodes();
            let pool: Vec<usize> = (0..net.nodes(l.layer)?).filter(|j| !critical.contains(j)).collect();
            let n = count_for(f, critical.len()).min(pool.len());
            let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            mask.push((l.layer, l.targets.clone(), picked));
        }
        points.push(masked_point(net, &mask, images, k, f)?);
    }
    Ok(points)
}

fn masked_point(net: &Network, mask: &Mask, images: &Tensor, k: usize, fraction: f64) -> Result<FidelityPoint> {
    let view = masked_view(net, mask)?;
    Ok(FidelityPoint {
        fraction,
        accuracy: class_accuracy(&view, images, k)?,
        masked_count: mask.iter().map(|(_, _, n)| n.len()).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRow {
    pub fraction: f64,
    pub masked_count: usize,
    /// `None` when the split is empty.
    pub easy: Option<f64>,
    pub hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTable {
    pub class_id: usize,
    pub easy_count: usize,
    pub hard_count: usize,
    pub rows: Vec<RepairRow>,
}

/// Accuracy on the class-`k` samples of `data` that the unmodified network
/// gets right (easy) and wrong (hard), after masking the top fraction of
/// noisy nodes per layer, most positive `mean_te` first.
pub fn repair_eval(
    net: &Network,
    d: &NoisyRegistry,
    data: &LabeledDataset,
    k: usize,
    fractions: &[f64],
) -> Result<RepairTable> {
    check_fractions(fractions, true)?;
    let class = data.filter_by_class(k, net.num_classes())?;
    let logits = net.forward(&class.images)?;
    let (easy, hard): (Vec<usize>, Vec<usize>) =
        (0..class.len()).partition(|&i| argmax(logits.item(i)) == k);
    let easy_images = class.images.select(&easy);
    let hard_images = class.images.select(&hard);

    let rows = fractions
        .iter()
        .map(|&f| {
            let mask: Mask = d
                .layers
                .iter()
                .map(|l| {
                    let mut noisy = l.noisy.clone();
                    noisy.sort_by(|a, b| b.mean_te.total_cmp(&a.mean_te).then(a.node.cmp(&b.node)));
                    let n = count_for(f, noisy.len());
                    (l.layer, l.targets.clone(), noisy[..n].iter().map(|d| d.node).collect())
                })
                .collect();
            let view = masked_view(net, &mask)?;
            let acc = |imgs: &Tensor| -> Result<Option<f64>> {
                if imgs.batch() == 0 {
                    Ok(None)
                } else {
                    class_accuracy(&view, imgs, k).map(Some)
                }
            };
            Ok(RepairRow {
                fraction: f,
                masked_count: mask.iter().map(|(_, _, n)| n.len()).sum(),
                easy: acc(&easy_images)?,
                hard: acc(&hard_images)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RepairTable {
        class_id: k,
        easy_count: easy.len(),
        hard_count: hard.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Population variance over samples.
    pub variance: f64,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, per_sample: Vec<f64>, config: serde_json::Value) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = per_sample.iter().sum::<f64>() / n;
        let variance = per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            metric: metric.to_owned(),
            per_sample,
            mean,
            variance,
            config,
        }
    }

    /// `index,score` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score\n");
        for (i, v) in self.per_sample.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Lipschitz estimate of each item of `images`; item `i` uses seed
/// `seed + i`. Noise is [`default_noise_sigma`] of the item unless given.
pub fn lipschitz_report(
    explainer: &dyn Explainer,
    images: &Tensor,
    sigma: Option<f64>,
    m_runs: usize,
    seed: u64,
) -> Result<MetricReport> {
    let scores = (0..images.batch())
        .into_par_iter()
        .map(|i| {
            let x = images.select(&[i]);
            let s = sigma.unwrap_or_else(|| default_noise_sigma(&x));
            lipschitz_estimate(explainer, &x, s, m_runs, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({
        "explainer": explainer.name(),
        "m_runs": m_runs,
        "noise_sigma": sigma.map_or(serde_json::Value::from("0.1 * input range"), serde_json::Value::from),
        "seed": seed,
    });
    Ok(MetricReport::new("le", scores, config))
}

pub fn irof_report(
    net: &Network,
    explainer: &dyn Explainer,
    images: &Tensor,
    k: usize,
    grid: usize,
) -> Result<MetricReport> {
    let scores = (0..images.batch())
        .into_par_iter()
        .map(|i| irof(net, explainer, &images.select(&[i]), k, grid))
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({
        "explainer": explainer.name(),
        "grid": grid,
        "class_id": k,
    });
    Ok(MetricReport::new("irof", scores, config))
}
