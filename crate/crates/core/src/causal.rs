//! Treatment effects of path interventions and the per-node significance
//! gate.
//!
//! The treatment effect of a path group on input `x` is the change of the
//! class-`k` logit (pre-softmax) between the intervened and the unmodified
//! network. A two-sided z-test on the per-input effects decides whether the
//! parent node matters; the sign of the mean then splits significant nodes
//! into critical (removing them lowers the class logit) and noisy (removing
//! them raises it).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{apply, enumerate_path_groups, sample_beta, InterventionPolicy, PathGroup};
use crate::nn::{ActivationTrace, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TeSamples {
    pub group: PathGroup,
    pub beta: f64,
    pub class_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub alpha: f64,
    pub min_samples: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_samples: 30,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Critical,
    Noisy,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDecision {
    pub node: usize,
    pub mean_te: f64,
    pub std_te: f64,
    /// Infinite when the effect is constant and non-zero.
    #[serde(with = "signed_inf")]
    pub z: f64,
    pub p: f64,
    pub kind: NodeKind,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided tail probability `2 * Phi(-|z|)`.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Mean and unbiased standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Decision from summary statistics of `n` effects.
pub fn decide(node: usize, mean: f64, std: f64, n: usize, alpha: f64) -> NodeDecision {
    let (z, p) = if std > 0.0 {
        let z = mean / (std / (n as f64).sqrt());
        (z, two_sided_p(z))
    } else if mean != 0.0 {
        (mean.signum() * f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };
    let kind = if p < alpha && mean < 0.0 {
        NodeKind::Critical
    } else if p < alpha && mean > 0.0 {
        NodeKind::Noisy
    } else {
        NodeKind::Neutral
    };
    NodeDecision {
        node,
        mean_te: mean,
        std_te: std,
        z,
        p,
        kind,
    }
}

pub fn z_test(te: &TeSamples, cfg: &TestConfig) -> Result<NodeDecision> {
    cfg.validate()?;
    let n = te.values.len();
    if n < cfg.min_samples.max(1) {
        return Err(Error::TooFewSamples {
            got: n,
            min: cfg.min_samples.max(1),
        });
    }
    let (mean, std) = mean_std(&te.values);
    Ok(decide(te.group.parent_node, mean, std, n, cfg.alpha))
}

/// Class-`k` logits of the unmodified network on `images`.
pub fn class_logits(logits: &Tensor, k: usize) -> Vec<f64> {
    (0..logits.batch()).map(|i| logits.item(i)[k] as f64).collect()
}

/// Per-input effect of scaling `group` by `beta` on the class-`k` logit.
pub fn treatment_effect(
    net: &Network,
    group: &PathGroup,
    beta: f64,
    images: &Tensor,
    k: usize,
) -> Result<TeSamples> {
    if k >= net.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: k,
            num_classes: net.num_classes(),
        });
    }
    if images.batch() == 0 {
        return Err(Error::EmptyClass(k));
    }
    let base = class_logits(&net.forward(images)?, k);
    let view = apply(net, group, beta)?;
    let treated = class_logits(&view.forward(images)?, k);
    Ok(TeSamples {
        group: group.clone(),
        beta,
        class_id: k,
        values: treated.iter().zip(&base).map(|(t, b)| t - b).collect(),
    })
}

/// Baseline forward pass of a class dataset, shared by every intervention on
/// it. Interventions on layer `l` only resume from the traced activation of
/// layer `l`, which gives the same logits as a full forward pass.
#[derive(Debug, Clone)]
pub struct ClassContext<'a> {
    net: &'a Network,
    class_id: usize,
    trace: ActivationTrace,
    base: Vec<f64>,
}

impl<'a> ClassContext<'a> {
    pub fn new(net: &'a Network, images: &Tensor, k: usize) -> Result<Self> {
        if k >= net.num_classes() {
            return Err(Error::ClassOutOfRange {
                class: k,
                num_classes: net.num_classes(),
            });
        }
        if images.batch() == 0 {
            return Err(Error::EmptyClass(k));
        }
        let (logits, trace) = net.forward_traced(images)?;
        Ok(Self {
            net,
            class_id: k,
            base: class_logits(&logits, k),
            trace,
        })
    }

    pub fn net(&self) -> &'a Network {
        self.net
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn samples(&self) -> usize {
        self.base.len()
    }

    /// Class-`k` logits of the unmodified network.
    pub fn baseline(&self) -> &[f64] {
        &self.base
    }

    pub fn treatment_effect(&self, group: &PathGroup, beta: f64) -> Result<TeSamples> {
        let view = apply(self.net, group, beta)?;
        let activation = self.trace.layer(group.parent_layer).clone();
        let treated = class_logits(&view.forward_from(group.parent_layer, activation)?, self.class_id);
        Ok(TeSamples {
            group: group.clone(),
            beta,
            class_id: self.class_id,
            values: treated.iter().zip(&self.base).map(|(t, b)| t - b).collect(),
        })
    }
}

/// RNG stream of the path group of `node` in `layer`; independent of the
/// order in which groups are evaluated.
pub fn group_rng(seed: u64, layer: usize, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | node as u64);
    rng
}

/// Tests every parent node of layer `l` against `targets`. The returned
/// decisions are ordered by node index.
#[allow(clippy::too_many_arguments)]
pub fn classify_layer(
    net: &Network,
    l: usize,
    targets: &[usize],
    images: &Tensor,
    k: usize,
    policy: &InterventionPolicy,
    cfg: &TestConfig,
    seed: u64,
) -> Result<Vec<NodeDecision>> {
    let ctx = ClassContext::new(net, images, k)?;
    classify_layer_with(&ctx, l, targets, policy, cfg, seed, &AtomicUsize::new(0))
}

/// [`classify_layer`] on a precomputed context. `evaluations` is increased
/// by the number of per-input treatment effects computed.
pub fn classify_layer_with(
    ctx: &ClassContext<'_>,
    l: usize,
    targets: &[usize],
    policy: &InterventionPolicy,
    cfg: &TestConfig,
    seed: u64,
    evaluations: &AtomicUsize,
) -> Result<Vec<NodeDecision>> {
    policy.validate()?;
    cfg.validate()?;
    if ctx.samples() < cfg.min_samples.max(1) {
        return Err(Error::TooFewSamples {
            got: ctx.samples(),
            min: cfg.min_samples.max(1),
        });
    }
    let groups = enumerate_path_groups(ctx.net(), l, targets)?;
    groups
        .par_iter()
        .map(|group| {
            let mut rng = group_rng(seed, l, group.parent_node);
            let beta = sample_beta(policy, &mut rng).beta;
            let te = ctx.treatment_effect(group, beta)?;
            evaluations.fetch_add(te.values.len(), Ordering::Relaxed);
            z_test(&te, cfg)
        })
        .collect()
}

mod signed_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

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
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid z value {t:?}"))),
        }
    }
}
