//! Forward-only inference engine for LeNet-class feed-forward networks.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s. The parameterized
//! layers (dense, conv2d) are the *graph layers*, numbered `1..=L` in
//! declaration order; graph layer `L` produces the logits. Each graph layer
//! owns the non-parameterized layers (relu, pooling, flatten) that follow it
//! up to the next parameterized layer, and its traced activation is the
//! output of that whole block.
//!
//! Nodes are output units for dense layers and output channels for conv
//! layers. Dot products accumulate in `f64` and are stored as `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Maxpool2d,
    Avgpool2d,
    Flatten,
}

impl LayerKind {
    pub fn is_parameterized(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub kernel: [usize; 2],
}

impl LayerSpec {
    fn bare(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            weight: None,
            bias: None,
            stride: [1, 1],
            padding: [0, 0],
            kernel: [1, 1],
        }
    }

    /// Dense layer with weight `[n_out, n_in]`.
    pub fn dense(name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Some(weight),
            bias,
            ..Self::bare(name, LayerKind::Dense)
        }
    }

    /// Conv layer with weight `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Self {
        Self {
            weight: Some(weight),
            bias,
            stride,
            padding,
            ..Self::bare(name, LayerKind::Conv2d)
        }
    }

    pub fn relu(name: &str) -> Self {
        Self::bare(name, LayerKind::Relu)
    }

    pub fn maxpool2d(name: &str, kernel: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            kernel,
            stride,
            ..Self::bare(name, LayerKind::Maxpool2d)
        }
    }

    pub fn avgpool2d(name: &str, kernel: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            kernel,
            stride,
            ..Self::bare(name, LayerKind::Avgpool2d)
        }
    }

    pub fn flatten(name: &str) -> Self {
        Self::bare(name, LayerKind::Flatten)
    }

    /// Output node count of a parameterized layer.
    pub fn out_nodes(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense | LayerKind::Conv2d => {
                self.weight.as_ref().and_then(|w| w.shape().first().copied())
            }
            _ => None,
        }
    }
}

/// Input scaling. `divide` is applied by the data loader; `mean`/`std` are
/// applied per channel at the start of [`Network::forward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub divide: f64,
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: Vec<f64>,
}

/// Output shape of `spec` applied to a single item of shape `in_shape`.
pub fn layer_output_shape(spec: &LayerSpec, in_shape: &[usize]) -> Result<Vec<usize>> {
    let mismatch = |msg: String| Err(Error::ShapeMismatch(format!("{}: {msg}", spec.name)));
    match spec.kind {
        LayerKind::Dense => {
            let w = spec.weight.as_ref().ok_or_else(|| {
                Error::ShapeMismatch(format!("{}: dense layer without weight", spec.name))
            })?;
            if w.shape().len() != 2 {
                return mismatch(format!("dense weight must be 2-d, got {:?}", w.shape()));
            }
            let n_in: usize = in_shape.iter().product();
            if w.shape()[1] != n_in {
                return mismatch(format!(
                    "dense expects {} inputs, got shape {in_shape:?}",
                    w.shape()[1]
                ));
            }
            Ok(vec![w.shape()[0]])
        }
        LayerKind::Conv2d => {
            let w = spec.weight.as_ref().ok_or_else(|| {
                Error::ShapeMismatch(format!("{}: conv layer without weight", spec.name))
            })?;
            let ws = w.shape();
            if ws.len() != 4 {
                return mismatch(format!("conv weight must be 4-d, got {ws:?}"));
            }
            if in_shape.len() != 3 || in_shape[0] != ws[1] {
                return mismatch(format!(
                    "conv expects [{}, H, W] input, got {in_shape:?}",
                    ws[1]
                ));
            }
            let h = spatial_out(in_shape[1], ws[2], spec.stride[0], spec.padding[0]);
            let w_out = spatial_out(in_shape[2], ws[3], spec.stride[1], spec.padding[1]);
            match (h, w_out) {
                (Some(h), Some(w_out)) => Ok(vec![ws[0], h, w_out]),
                _ => mismatch(format!("kernel {:?} larger than padded input {in_shape:?}", &ws[2..])),
            }
        }
        LayerKind::Relu => Ok(in_shape.to_vec()),
        LayerKind::Maxpool2d | LayerKind::Avgpool2d => {
            if in_shape.len() != 3 {
                return mismatch(format!("pooling expects [C, H, W], got {in_shape:?}"));
            }
            let h = spatial_out(in_shape[1], spec.kernel[0], spec.stride[0], 0);
            let w = spatial_out(in_shape[2], spec.kernel[1], spec.stride[1], 0);
            match (h, w) {
                (Some(h), Some(w)) => Ok(vec![in_shape[0], h, w]),
                _ => mismatch(format!("pool kernel {:?} larger than {in_shape:?}", spec.kernel)),
            }
        }
        LayerKind::Flatten => Ok(vec![in_shape.iter().product()]),
    }
}

fn spatial_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one graph layer, derived at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayerInfo {
    /// Index of the parameterized layer in [`Network::layers`].
    pub layer_index: usize,
    /// One past the last layer belonging to this block.
    pub block_end: usize,
    /// Number of nodes (units or channels).
    pub nodes: usize,
    /// Per-item shape of the traced activation.
    pub trace_shape: Vec<usize>,
    /// Spatial plane of each node at block output, for conv layers.
    pub node_plane: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    num_classes: usize,
    preprocess: Option<Preprocess>,
    graph: Vec<GraphLayerInfo>,
}

/// Per-graph-layer activations, indexed `1..=L` via [`ActivationTrace::layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    entries: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Activation of graph layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.entries[l - 1]
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }
}

impl Network {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        num_classes: usize,
        preprocess: Option<Preprocess>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::RejectedInvalid("num_classes must be positive".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::RejectedInvalid(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        if let Some(p) = &preprocess {
            validate_preprocess(p, &input_shape)?;
        }
        for layer in &layers {
            validate_params(layer)?;
        }

        let mut graph: Vec<GraphLayerInfo> = Vec::new();
        let mut shape = input_shape.clone();
        let mut plane: Option<(usize, usize)> = None;
        for (i, layer) in layers.iter().enumerate() {
            if !layer.kind.is_parameterized() && graph.is_empty() {
                return Err(Error::RejectedInvalid(format!(
                    "layer {} precedes the first parameterized layer",
                    layer.name
                )));
            }
            shape = layer_output_shape(layer, &shape)?;
            if layer.kind.is_parameterized() {
                if let Some(last) = graph.last_mut() {
                    last.block_end = i;
                }
                graph.push(GraphLayerInfo {
                    layer_index: i,
                    block_end: layers.len(),
                    nodes: layer.out_nodes().unwrap_or(0),
                    trace_shape: Vec::new(),
                    node_plane: None,
                });
                plane = None;
            }
            if shape.len() == 3 {
                plane = Some((shape[1], shape[2]));
            }
            let last = graph.last_mut().expect("graph layer exists");
            last.trace_shape = shape.clone();
            last.node_plane = plane;
        }

        let Some(final_layer) = layers.last() else {
            return Err(Error::RejectedInvalid("network has no layers".into()));
        };
        if final_layer.kind != LayerKind::Dense || final_layer.out_nodes() != Some(num_classes) {
            return Err(Error::RejectedInvalid(format!(
                "final layer must be dense with {num_classes} outputs"
            )));
        }

        Ok(Self {
            layers,
            input_shape,
            num_classes,
            preprocess,
            graph,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn preprocess(&self) -> Option<&Preprocess> {
        self.preprocess.as_ref()
    }

    /// Number of graph layers `L`.
    pub fn graph_layers(&self) -> usize {
        self.graph.len()
    }

    /// Geometry of graph layer `l` (1-based).
    pub fn graph_layer(&self, l: usize) -> Result<&GraphLayerInfo> {
        if l == 0 || l > self.graph.len() {
            return Err(Error::InvalidLayer {
                layer: l,
                reason: format!("graph layers are 1..={}", self.graph.len()),
            });
        }
        Ok(&self.graph[l - 1])
    }

    /// The parameterized layer spec of graph layer `l`.
    pub fn graph_layer_spec(&self, l: usize) -> Result<&LayerSpec> {
        let info = self.graph_layer(l)?;
        Ok(&self.layers[info.layer_index])
    }

    pub fn nodes(&self, l: usize) -> Result<usize> {
        Ok(self.graph_layer(l)?.nodes)
    }

    /// Logits `[N, num_classes]` for a batch `[N] ++ input_shape`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let input = self.standardize(batch)?;
        self.run(0, input, &|_| None, None)
    }

    /// Logits plus the per-graph-layer activation trace.
    pub fn forward_traced(&self, batch: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        let input = self.standardize(batch)?;
        let mut entries = Vec::with_capacity(self.graph.len());
        let logits = self.run(0, input, &|_| None, Some(&mut entries))?;
        Ok((logits, ActivationTrace { entries }))
    }

    pub(crate) fn standardize(&self, batch: &Tensor) -> Result<Tensor> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {shape:?} does not match input shape {:?}",
                self.input_shape
            )));
        }
        let mut out = batch.clone();
        let Some(p) = &self.preprocess else {
            return Ok(out);
        };
        if p.mean.is_empty() {
            return Ok(out);
        }
        let channels = self.input_shape[0];
        let plane: usize = self.input_shape[1..].iter().product();
        for item in out.data_mut().chunks_mut(channels * plane) {
            for (c, chan) in item.chunks_mut(plane).enumerate() {
                let (m, s) = (p.mean[c], p.std[c]);
                for v in chan {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Runs layers `start..` on `input`. `weight_of` may substitute the weight
    /// tensor of a layer (by index into `layers`).
    pub(crate) fn run<'w>(
        &self,
        start: usize,
        mut x: Tensor,
        weight_of: &dyn Fn(usize) -> Option<&'w Tensor>,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut graph_idx = self.graph.iter().position(|g| g.layer_index >= start);
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            x = match layer.kind {
                LayerKind::Dense => {
                    let w = weight_of(i).or(layer.weight.as_ref()).expect("validated");
                    dense(&x, w, layer.bias.as_ref())?
                }
                LayerKind::Conv2d => {
                    let w = weight_of(i).or(layer.weight.as_ref()).expect("validated");
                    conv2d(&x, w, layer.bias.as_ref(), layer.stride, layer.padding)?
                }
                LayerKind::Relu => relu(x),
                LayerKind::Maxpool2d => pool2d(&x, layer.kernel, layer.stride, PoolOp::Max)?,
                LayerKind::Avgpool2d => pool2d(&x, layer.kernel, layer.stride, PoolOp::Avg)?,
                LayerKind::Flatten => {
                    let n = x.batch();
                    let rest = x.item_len();
                    x.reshape(vec![n, rest])?
                }
            };
            if let (Some(t), Some(g)) = (trace.as_deref_mut(), graph_idx) {
                if self.graph[g].block_end == i + 1 {
                    t.push(x.clone());
                    graph_idx = Some(g + 1).filter(|&n| n < self.graph.len());
                }
            }
        }
        Ok(x)
    }

    /// Resumes the forward pass from the activation of graph layer `l`,
    /// i.e. runs graph layers `l+1..=L` on `activation`.
    pub(crate) fn run_from<'w>(
        &self,
        l: usize,
        activation: Tensor,
        weight_of: &dyn Fn(usize) -> Option<&'w Tensor>,
    ) -> Result<Tensor> {
        let start = self.graph_layer(l)?.block_end;
        self.run(start, activation, weight_of, None)
    }
}

fn validate_preprocess(p: &Preprocess, input_shape: &[usize]) -> Result<()> {
    if !(p.divide > 0.0 && p.divide.is_finite()) {
        return Err(Error::RejectedInvalid("preprocess.divide must be positive".into()));
    }
    if p.mean.len() != p.std.len() {
        return Err(Error::RejectedInvalid("preprocess mean/std length differ".into()));
    }
    if !p.mean.is_empty() && (input_shape.len() != 3 || p.mean.len() != input_shape[0]) {
        return Err(Error::RejectedInvalid(
            "preprocess mean/std need one value per input channel".into(),
        ));
    }
    if p.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || p.mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::RejectedInvalid("preprocess std must be positive and finite".into()));
    }
    Ok(())
}

fn validate_params(layer: &LayerSpec) -> Result<()> {
    let invalid = |msg: String| Err(Error::RejectedInvalid(format!("{}: {msg}", layer.name)));
    match layer.kind {
        LayerKind::Dense | LayerKind::Conv2d => {
            let Some(w) = &layer.weight else {
                return invalid("missing weight".into());
            };
            let rank = if layer.kind == LayerKind::Dense { 2 } else { 4 };
            if w.shape().len() != rank {
                return invalid(format!("weight shape {:?} has wrong rank", w.shape()));
            }
            if w.shape().contains(&0) {
                return invalid(format!("empty weight shape {:?}", w.shape()));
            }
            if !w.is_finite() {
                return invalid("non-finite weight".into());
            }
            if let Some(b) = &layer.bias {
                if b.len() != w.shape()[0] {
                    return invalid(format!("bias length {} != {}", b.len(), w.shape()[0]));
                }
                if !b.is_finite() {
                    return invalid("non-finite bias".into());
                }
            }
            if layer.kind == LayerKind::Conv2d && layer.stride.contains(&0) {
                return invalid("zero stride".into());
            }
        }
        _ => {
            if layer.weight.is_some() || layer.bias.is_some() {
                return invalid("non-parameterized layer carries parameters".into());
            }
            if matches!(layer.kind, LayerKind::Maxpool2d | LayerKind::Avgpool2d)
                && (layer.kernel.contains(&0) || layer.stride.contains(&0))
            {
                return invalid("pool kernel and stride must be positive".into());
            }
        }
    }
    Ok(())
}

fn dense(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    if x.item_len() != n_in {
        return Err(Error::ShapeMismatch(format!(
            "dense expects {n_in} inputs, got {:?}",
            x.shape()
        )));
    }
    let n = x.batch();
    let wd = w.data();
    let mut out = Vec::with_capacity(n * n_out);
    for s in 0..n {
        let xi = x.item(s);
        for o in 0..n_out {
            let row = &wd[o * n_in..(o + 1) * n_in];
            let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
            for (a, b) in row.iter().zip(xi) {
                acc += *a as f64 * *b as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, n_out], out)
}

fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv expects [N, {}, H, W], got {xs:?}",
            ws[1]
        )));
    }
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = spatial_out(h, kh, stride[0], padding[0])
        .ok_or_else(|| Error::ShapeMismatch("conv kernel exceeds input".into()))?;
    let ow = spatial_out(wd, kw, stride[1], padding[1])
        .ok_or_else(|| Error::ShapeMismatch("conv kernel exceeds input".into()))?;
    let mut out = vec![0f32; n * c_out * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    for s in 0..n {
        let item = &xd[s * c_in * h * wd..(s + 1) * c_in * h * wd];
        for co in 0..c_out {
            let b = bias.map_or(0.0, |b| b.data()[co] as f64);
            let kernel = &wdat[co * c_in * kh * kw..(co + 1) * c_in * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ci in 0..c_in {
                        let plane = &item[ci * h * wd..(ci + 1) * h * wd];
                        let k = &kernel[ci * kh * kw..(ci + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * stride[0] + ky) as isize - padding[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                            for kx in 0..kw {
                                let ix = (ox * stride[1] + kx) as isize - padding[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += k[ky * kw + kx] as f64 * row[ix as usize] as f64;
                            }
                        }
                    }
                    out[((s * c_out + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

fn relu(mut x: Tensor) -> Tensor {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

#[derive(Clone, Copy)]
enum PoolOp {
    Max,
    Avg,
}

fn pool2d(x: &Tensor, kernel: [usize; 2], stride: [usize; 2], op: PoolOp) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch(format!("pooling expects [N, C, H, W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = spatial_out(h, kernel[0], stride[0], 0)
        .ok_or_else(|| Error::ShapeMismatch("pool kernel exceeds input".into()))?;
    let ow = spatial_out(w, kernel[1], stride[1], 0)
        .ok_or_else(|| Error::ShapeMismatch("pool kernel exceeds input".into()))?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut max = f32::NEG_INFINITY;
                let mut sum = 0f64;
                for ky in 0..kernel[0] {
                    for kx in 0..kernel[1] {
                        let v = plane[(oy * stride[0] + ky) * w + ox * stride[1] + kx];
                        max = max.max(v);
                        sum += v as f64;
                    }
                }
                out.push(match op {
                    PoolOp::Max => max,
                    PoolOp::Avg => (sum / (kernel[0] * kernel[1]) as f64) as f32,
                });
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}
