//! Spatial explanations derived from causal graphs.
//!
//! The response of a child node `i` to a parent node `j` is the parent's
//! traced activation pushed through the weights `w_ji` alone: a
//! cross-correlation with the kernel slice when both are convolutional, an
//! elementwise product with the matching weight block when a conv parent
//! feeds a dense child, and `w_ji * a_j` for dense parents. Node saliency
//! averages the responses over the critical parents, up-samples the result
//! to the input size and min-max normalizes it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causal::class_logits;
use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::nn::{ActivationTrace, LayerKind, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SaliencySource {
    /// Saliency of child `node` in layer `layer + 1`, averaged over its critical parents.
    Node { layer: usize, node: usize },
    /// Mean over the critical children of layer `layer + 1`.
    Aggregate { layer: usize },
    /// Response of `child` to a single parent.
    Filter { layer: usize, parent: usize, child: usize },
    Occlusion,
}

/// A map over the input plane with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f32>,
    pub source: SaliencySource,
    /// The map was constant before normalization and has been zeroed.
    pub degenerate: bool,
}

impl SaliencyMap {
    fn normalized(height: usize, width: usize, raw: Vec<f64>, source: SaliencySource) -> Self {
        let (values, degenerate) = minmax_normalize(&raw);
        Self {
            height,
            width,
            values,
            source,
            degenerate,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// Scales `values` to `[0, 1]`. A constant (or empty) input gives all zeros
/// and `true`.
pub fn minmax_normalize(values: &[f64]) -> (Vec<f32>, bool) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let scale = lo.abs().max(hi.abs());
    // NaN ranges count as degenerate.
    let informative = range > 1e-9 * scale;
    if values.is_empty() || !informative {
        return (vec![0.0; values.len()], true);
    }
    let out = values.iter().map(|v| (((v - lo) / range) as f32).clamp(0.0, 1.0)).collect();
    (out, false)
}

/// Bilinear resize of a row-major `h x w` plane, half-pixel centres.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane size");
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Raw response plane of child `i` (layer `l + 1`) to parent `j` (layer `l`)
/// for trace item `sample`, as `(h, w, values)`.
pub fn node_response(
    net: &Network,
    trace: &ActivationTrace,
    sample: usize,
    l: usize,
    j: usize,
    i: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let parent = net.graph_layer(l)?;
    let child = net.graph_layer_spec(l + 1)?;
    if j >= parent.nodes {
        return Err(Error::NotInGraph { layer: l, node: j });
    }
    if i >= net.nodes(l + 1)? {
        return Err(Error::NotInGraph { layer: l + 1, node: i });
    }
    let act = trace.layer(l);
    if sample >= act.batch() {
        return Err(Error::InvalidArgument(format!(
            "sample {sample} out of range for a trace of {} items",
            act.batch()
        )));
    }
    let item = act.item(sample);
    let weight = child.weight.as_ref().expect("validated");
    let ws = weight.shape();
    match (parent.node_plane, child.kind) {
        (Some((h, w)), LayerKind::Conv2d) => {
            let plane = &item[j * h * w..(j + 1) * h * w];
            let (kh, kw) = (ws[2], ws[3]);
            let kernel = &weight.data()[(i * ws[1] + j) * kh * kw..][..kh * kw];
            Ok(correlate(plane, h, w, kernel, kh, kw, child.stride, child.padding))
        }
        (Some((h, w)), _) => {
            let row = &weight.data()[i * ws[1]..(i + 1) * ws[1]];
            let span = j * h * w..(j + 1) * h * w;
            let values = item[span.clone()]
                .iter()
                .zip(&row[span])
                .map(|(a, w)| *a as f64 * *w as f64)
                .collect();
            Ok((h, w, values))
        }
        (None, _) => Ok((1, 1, vec![item[j] as f64 * weight.data()[i * ws[1] + j] as f64])),
    }
}

#[allow(clippy::too_many_arguments)]
fn correlate(
    plane: &[f32],
    h: usize,
    w: usize,
    kernel: &[f32],
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    padding: [usize; 2],
) -> (usize, usize, Vec<f64>) {
    let oh = (h + 2 * padding[0] - kh) / stride[0] + 1;
    let ow = (w + 2 * padding[1] - kw) / stride[1] + 1;
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0f64;
            for u in 0..kh {
                let y = (r * stride[0] + u) as isize - padding[0] as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let x = (c * stride[1] + v) as isize - padding[1] as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    acc += plane[y as usize * w + x as usize] as f64 * kernel[u * kw + v] as f64;
                }
            }
            out[r * ow + c] = acc;
        }
    }
    (oh, ow, out)
}

fn input_plane(net: &Network) -> (usize, usize) {
    let s = net.input_shape();
    match s.len() {
        3 => (s[1], s[2]),
        2 => (s[0], s[1]),
        _ => (1, s.iter().product()),
    }
}

/// Mean response over the critical parents of `i`, before up-sampling.
fn raw_node_saliency(
    net: &Network,
    trace: &ActivationTrace,
    sample: usize,
    g: &CausalGraph,
    l: usize,
    i: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    if !g.critical_nodes(l + 1).contains(&i) {
        return Err(Error::NotInGraph { layer: l + 1, node: i });
    }
    let parents = g.critical_nodes(l);
    if parents.is_empty() {
        return Err(Error::NoParents { layer: l + 1, node: i });
    }
    let mut sum: Option<(usize, usize, Vec<f64>)> = None;
    for &j in &parents {
        let (h, w, r) = node_response(net, trace, sample, l, j, i)?;
        match &mut sum {
            None => sum = Some((h, w, r)),
            Some((_, _, acc)) => acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b),
        }
    }
    let (h, w, mut acc) = sum.expect("non-empty parents");
    let n = parents.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok((h, w, acc))
}

fn to_input_plane(net: &Network, h: usize, w: usize, raw: &[f64]) -> (usize, usize, Vec<f64>) {
    let (out_h, out_w) = input_plane(net);
    (out_h, out_w, upsample_bilinear(raw, h, w, out_h, out_w))
}

/// Saliency of critical child `i` of layer `l + 1` for trace item `sample`.
pub fn node_saliency(
    net: &Network,
    trace: &ActivationTrace,
    sample: usize,
    g: &CausalGraph,
    l: usize,
    i: usize,
) -> Result<SaliencyMap> {
    let (h, w, raw) = raw_node_saliency(net, trace, sample, g, l, i)?;
    let (h, w, up) = to_input_plane(net, h, w, &raw);
    Ok(SaliencyMap::normalized(h, w, up, SaliencySource::Node { layer: l, node: i }))
}

fn single_input(net: &Network, x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    if x.shape() == net.input_shape() {
        return x.clone().reshape(shape);
    }
    if x.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "expected one input of shape {:?}, got {:?}",
            net.input_shape(),
            x.shape()
        )));
    }
    Ok(x.clone())
}

/// Pixel-wise mean of the node saliencies of every critical node of layer
/// `l + 1`, re-normalized.
pub fn aggregate_saliency(net: &Network, x: &Tensor, g: &CausalGraph, l: usize) -> Result<SaliencyMap> {
    let children = g.critical_nodes(l + 1);
    if children.is_empty() {
        return Err(Error::NoCriticalNodes(l + 1));
    }
    let x = single_input(net, x)?;
    let (_, trace) = net.forward_traced(&x)?;
    let (h, w) = input_plane(net);
    let mut acc = vec![0.0f64; h * w];
    for &i in &children {
        let map = node_saliency(net, &trace, 0, g, l, i)?;
        acc.iter_mut().zip(&map.values).for_each(|(a, v)| *a += *v as f64);
    }
    let n = children.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyMap::normalized(h, w, acc, SaliencySource::Aggregate { layer: l }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    /// Strict 3x3 maxima with their value, and strict minima with the
    /// negated value; sorted by score descending, row-major on ties.
    pub peaks: Vec<Peak>,
    /// First row-major position of the largest value.
    pub absolute_max: Peak,
}

/// Strict local extrema over in-bounds 3x3 neighbourhoods. A pixel without
/// neighbours is not an extremum.
pub fn find_peaks(values: &[f32], height: usize, width: usize) -> PeakSet {
    assert_eq!(values.len(), height * width, "plane size");
    assert!(!values.is_empty(), "empty plane");
    let mut peaks = Vec::new();
    let mut best = 0;
    for r in 0..height {
        for c in 0..width {
            let v = values[r * width + c];
            if v > values[best] {
                best = r * width + c;
            }
            let (mut above, mut below, mut any) = (true, true, false);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    if (dr == 0 && dc == 0) || y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                        continue;
                    }
                    any = true;
                    let n = values[y as usize * width + x as usize];
                    above &= v > n;
                    below &= v < n;
                }
            }
            if any && above {
                peaks.push(Peak { row: r, col: c, score: v });
            } else if any && below {
                peaks.push(Peak { row: r, col: c, score: -v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    PeakSet {
        peaks,
        absolute_max: Peak {
            row: best / width,
            col: best % width,
            score: values[best],
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResponse {
    pub parent: usize,
    pub child: usize,
    pub map: SaliencyMap,
    pub peaks: PeakSet,
}

/// For every critical child of layer `l + 1`, the response to the critical
/// parent with the largest `|mean_te|`, with its peaks.
pub fn top1_filter_response(
    net: &Network,
    x: &Tensor,
    g: &CausalGraph,
    l: usize,
) -> Result<Vec<FilterResponse>> {
    let children = g.critical_nodes(l + 1);
    let parents = g.critical_nodes(l);
    if children.is_empty() || parents.is_empty() {
        return Err(Error::NoCriticalNodes(if children.is_empty() { l + 1 } else { l }));
    }
    let strength = |j: usize| g.decision(l, j).map(|d| d.mean_te.abs()).unwrap_or(0.0);
    let mut parent = parents[0];
    for &j in &parents[1..] {
        if strength(j) > strength(parent) {
            parent = j;
        }
    }
    let x = single_input(net, x)?;
    let (_, trace) = net.forward_traced(&x)?;
    children
        .into_iter()
        .map(|child| {
            let (h, w, raw) = node_response(net, &trace, 0, l, parent, child)?;
            let (h, w, up) = to_input_plane(net, h, w, &raw);
            let map = SaliencyMap::normalized(h, w, up, SaliencySource::Filter { layer: l, parent, child });
            let peaks = find_peaks(&map.values, h, w);
            Ok(FilterResponse {
                parent,
                child,
                map,
                peaks,
            })
        })
        .collect()
}

/// Per-pixel mean drop of the class-`k` logit over the `patch` windows
/// (placed every `stride` pixels) covering it, when the window is set to
/// `fill` in every channel. Pixels no window covers get 0.
pub fn occlusion_baseline(
    net: &Network,
    x: &Tensor,
    k: usize,
    patch: (usize, usize),
    stride: (usize, usize),
    fill: f32,
) -> Result<SaliencyMap> {
    if k >= net.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: k,
            num_classes: net.num_classes(),
        });
    }
    let x = single_input(net, x)?;
    let (h, w) = input_plane(net);
    let channels = x.item_len() / (h * w);
    if patch.0 == 0 || patch.1 == 0 || patch.0 > h || patch.1 > w {
        return Err(Error::ShapeMismatch(format!(
            "occlusion patch {patch:?} does not fit a {h}x{w} input"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidArgument("occlusion stride must be positive".into()));
    }
    let origins: Vec<(usize, usize)> = (0..=h - patch.0)
        .step_by(stride.0)
        .flat_map(|r| (0..=w - patch.1).step_by(stride.1).map(move |c| (r, c)))
        .collect();
    let base = x.item(0);
    let mut batch = Vec::with_capacity(origins.len() * base.len());
    for &(r0, c0) in &origins {
        let mut item = base.to_vec();
        for ch in 0..channels {
            for r in r0..r0 + patch.0 {
                item[ch * h * w + r * w + c0..][..patch.1].fill(fill);
            }
        }
        batch.extend_from_slice(&item);
    }
    let mut shape = vec![origins.len()];
    shape.extend_from_slice(net.input_shape());
    let occluded = class_logits(&net.forward(&Tensor::new(shape, batch)?)?, k);
    let reference = class_logits(&net.forward(&x)?, k)[0];

    let mut sum = vec![0.0f64; h * w];
    let mut cover = vec![0u32; h * w];
    for (&(r0, c0), logit) in origins.iter().zip(&occluded) {
        for r in r0..r0 + patch.0 {
            for c in c0..c0 + patch.1 {
                sum[r * w + c] += reference - logit;
                cover[r * w + c] += 1;
            }
        }
    }
    let raw = sum
        .iter()
        .zip(&cover)
        .map(|(s, n)| if *n == 0 { 0.0 } else { s / *n as f64 })
        .collect();
    Ok(SaliencyMap::normalized(h, w, raw, SaliencySource::Occlusion))
}

/// The last conv layer, whose filters are the parents of the explanation.
/// Falls back to `L - 1` when there is no conv layer below the output.
pub fn default_explain_layer(net: &Network) -> usize {
    let top = net.graph_layers();
    (1..top)
        .rev()
        .find(|&l| net.graph_layer_spec(l).map(|s| s.kind == LayerKind::Conv2d).unwrap_or(false))
        .unwrap_or(top.saturating_sub(1).max(1))
}

/// Binary 16-bit PGM; values in `[0, 1]` map to `0..=65535`.
pub fn map_to_pgm(map: &SaliencyMap, comment: &str) -> Vec<u8> {
    let mut out = format!("P5\n# {}\n{} {}\n65535\n", comment.replace('\n', " "), map.width, map.height)
        .into_bytes();
    for v in &map.values {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn map_to_csv(map: &SaliencyMap) -> String {
    let mut out = String::new();
    for row in map.values.chunks(map.width.max(1)) {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_pgm(map: &SaliencyMap, comment: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map_to_pgm(map, comment)).map_err(|e| Error::io(path, e))
}

pub fn write_csv(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map_to_csv(map)).map_err(|e| Error::io(path, e))
}
