//! The do-operator on weight paths.
//!
//! A [`PathGroup`] bundles every weight leading from one parent node of graph
//! layer `l` to a set of target nodes of layer `l + 1`. Applying an
//! intervention multiplies that bundle by `beta` inside a [`NetworkView`],
//! which copies only the touched weight tensor and leaves the base network
//! untouched. Biases are never scaled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathGroup {
    pub parent_layer: usize,
    pub parent_node: usize,
    /// Sorted, de-duplicated node indices in layer `parent_layer + 1`.
    pub targets: Vec<usize>,
    /// Parent is a conv layer and the child a dense layer, so node `j` owns
    /// a contiguous range of flattened input columns.
    pub crossing_flatten: bool,
}

impl PathGroup {
    pub fn new(net: &Network, l: usize, node: usize, targets: &[usize]) -> Result<Self> {
        let targets = normalize_targets(net, l, targets)?;
        let n_p = net.nodes(l)?;
        if node >= n_p {
            return Err(Error::InvalidGroup(format!(
                "parent node {node} out of range for layer {l} with {n_p} nodes"
            )));
        }
        Ok(Self {
            parent_layer: l,
            parent_node: node,
            targets,
            crossing_flatten: crosses_flatten(net, l)?,
        })
    }
}

fn check_parent_layer(net: &Network, l: usize) -> Result<()> {
    let top = net.graph_layers();
    if l == 0 || l >= top {
        return Err(Error::InvalidLayer {
            layer: l,
            reason: format!("parent layer must be in 1..={}", top.saturating_sub(1)),
        });
    }
    Ok(())
}

fn normalize_targets(net: &Network, l: usize, targets: &[usize]) -> Result<Vec<usize>> {
    check_parent_layer(net, l)?;
    if targets.is_empty() {
        return Err(Error::InvalidGroup("target set is empty".into()));
    }
    let n_c = net.nodes(l + 1)?;
    let mut t = targets.to_vec();
    t.sort_unstable();
    t.dedup();
    if let Some(&bad) = t.iter().find(|&&t| t >= n_c) {
        return Err(Error::InvalidGroup(format!(
            "target {bad} out of range for layer {} with {n_c} nodes",
            l + 1
        )));
    }
    Ok(t)
}

fn crosses_flatten(net: &Network, l: usize) -> Result<bool> {
    let parent = net.graph_layer_spec(l)?.kind;
    let child = net.graph_layer_spec(l + 1)?.kind;
    match (parent, child) {
        (LayerKind::Dense, LayerKind::Conv2d) => Err(Error::InvalidLayer {
            layer: l,
            reason: "dense layer feeding a conv layer has no node mapping".into(),
        }),
        (LayerKind::Conv2d, LayerKind::Dense) => Ok(true),
        _ => Ok(false),
    }
}

/// One path group per parent node of layer `l`, all sharing `targets`.
pub fn enumerate_path_groups(net: &Network, l: usize, targets: &[usize]) -> Result<Vec<PathGroup>> {
    let targets = normalize_targets(net, l, targets)?;
    let crossing = crosses_flatten(net, l)?;
    Ok((0..net.nodes(l)?)
        .map(|j| PathGroup {
            parent_layer: l,
            parent_node: j,
            targets: targets.clone(),
            crossing_flatten: crossing,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub mode: InterventionMode,
    /// Centre of the uniform draw; unused in binary mode.
    pub b: f64,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 0.01;

impl InterventionPolicy {
    pub fn binary() -> Self {
        Self {
            mode: InterventionMode::Binary,
            b: 0.0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn continuous(b: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            mode: InterventionMode::Continuous,
            b,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == InterventionMode::Continuous
            && !(self.epsilon > 0.0 && self.epsilon < self.b && self.b < 1.0)
        {
            return Err(Error::InvalidPolicy(format!(
                "continuous policy needs 0 < epsilon < b < 1, got b={} epsilon={}",
                self.b, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionValue {
    pub beta: f64,
}

/// Binary mode always yields 0 and leaves `rng` untouched; continuous mode
/// draws from `U(b - epsilon, b + epsilon)`.
pub fn sample_beta<R: Rng + ?Sized>(policy: &InterventionPolicy, rng: &mut R) -> InterventionValue {
    match policy.mode {
        InterventionMode::Binary => InterventionValue { beta: 0.0 },
        InterventionMode::Continuous => InterventionValue {
            beta: rng.random_range(policy.b - policy.epsilon..=policy.b + policy.epsilon),
        },
    }
}

/// A network with some weight tensors replaced. Tensors that were not
/// intervened on are borrowed from the base.
#[derive(Debug, Clone)]
pub struct NetworkView<'a> {
    base: &'a Network,
    overrides: Vec<(usize, Tensor)>,
}

impl<'a> NetworkView<'a> {
    pub fn new(base: &'a Network) -> Self {
        Self {
            base,
            overrides: Vec::new(),
        }
    }

    pub fn base(&self) -> &'a Network {
        self.base
    }

    /// Weight of `layers()[index]` as seen through the view.
    pub fn weight(&self, index: usize) -> Option<&Tensor> {
        self.overrides
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, t)| t)
            .or_else(|| self.base.layers()[index].weight.as_ref())
    }

    /// Number of weight tensors copied so far.
    pub fn copied_tensors(&self) -> usize {
        self.overrides.len()
    }

    /// Scales the weights of `group` by `beta`, composing with earlier
    /// interventions on the same view.
    pub fn intervene(&mut self, group: &PathGroup, beta: f64) -> Result<()> {
        let net = self.base;
        let expected = PathGroup::new(net, group.parent_layer, group.parent_node, &group.targets)
            .map_err(|e| Error::InvalidGroup(e.to_string()))?;
        if expected != *group {
            return Err(Error::InvalidGroup(format!(
                "group {group:?} does not match the network geometry"
            )));
        }
        let child_index = net.graph_layer(group.parent_layer + 1)?.layer_index;
        let slot = match self.overrides.iter().position(|(i, _)| *i == child_index) {
            Some(p) => p,
            None => {
                let w = net.layers()[child_index].weight.clone().expect("validated");
                self.overrides.push((child_index, w));
                self.overrides.len() - 1
            }
        };
        let weight = &mut self.overrides[slot].1;
        let shape = weight.shape().to_vec();
        let row_len: usize = shape[1..].iter().product();
        let span = path_span(net, group, &shape)?;
        let data = weight.data_mut();
        for &t in &group.targets {
            let row = &mut data[t * row_len..(t + 1) * row_len];
            for v in &mut row[span.clone()] {
                *v = (*v as f64 * beta) as f32;
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let input = self.base.standardize(batch)?;
        self.base.run(0, input, &|i| self.lookup(i), None)
    }

    /// Runs graph layers `l + 1..=L` on a traced activation of layer `l`.
    pub fn forward_from(&self, l: usize, activation: Tensor) -> Result<Tensor> {
        self.base.run_from(l, activation, &|i| self.lookup(i))
    }

    fn lookup(&self, index: usize) -> Option<&Tensor> {
        self.overrides.iter().find(|(i, _)| *i == index).map(|(_, t)| t)
    }
}

/// Range of positions within one target row of the child weight that belong
/// to the parent node.
fn path_span(
    net: &Network,
    group: &PathGroup,
    child_shape: &[usize],
) -> Result<std::ops::Range<usize>> {
    let j = group.parent_node;
    let child = net.graph_layer_spec(group.parent_layer + 1)?;
    match child.kind {
        LayerKind::Conv2d => {
            let k = child_shape[2] * child_shape[3];
            Ok(j * k..(j + 1) * k)
        }
        _ if group.crossing_flatten => {
            let parent = net.graph_layer(group.parent_layer)?;
            let (h, w) = parent.node_plane.ok_or_else(|| {
                Error::InvalidGroup("conv parent without a spatial plane".into())
            })?;
            Ok(j * h * w..(j + 1) * h * w)
        }
        _ => Ok(j..j + 1),
    }
}

/// Intervened view of `net` with `group` scaled by `beta`.
pub fn apply<'a>(net: &'a Network, group: &PathGroup, beta: f64) -> Result<NetworkView<'a>> {
    let mut view = NetworkView::new(net);
    view.intervene(group, beta)?;
    Ok(view)
}
