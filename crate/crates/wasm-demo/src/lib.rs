//! Browser demo over the bundled LeNet and MNIST slices: predictions, per
//! class causal graphs, and causal or occlusion saliency with peaks.
//!
//! [`Session`] holds the logic and runs natively; [`Demo`] is the thin
//! `wasm-bindgen` surface the page talks to, passing JSON strings and
//! `Float32Array`s.

use std::collections::BTreeMap;

use ceg_core::causal::TestConfig;
use ceg_core::explain::{aggregate_saliency, default_explain_layer, find_peaks, occlusion_baseline, PeakSet, SaliencyMap};
use ceg_core::graph::{graph_to_dot, infer_graph, CausalGraph, NoisyRegistry};
use ceg_core::intervention::InterventionPolicy;
use ceg_core::io::{self, LabeledDataset};
use ceg_core::metrics::argmax;
use ceg_core::Network;
use serde::Serialize;
use wasm_bindgen::prelude::*;

static MODEL: &[u8] = include_bytes!("../../../fixtures/lenet.cegm");
static VAL_IMAGES: &[u8] = include_bytes!("../../../fixtures/val-images-idx3-ubyte");
static VAL_LABELS: &[u8] = include_bytes!("../../../fixtures/val-labels-idx1-ubyte");
static TEST_IMAGES: &[u8] = include_bytes!("../../../fixtures/test-images-idx3-ubyte");
static TEST_LABELS: &[u8] = include_bytes!("../../../fixtures/test-labels-idx1-ubyte");

const SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Causal,
    Occlusion,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "causal" => Ok(Method::Causal),
            "occlusion" => Ok(Method::Occlusion),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub nodes: usize,
    pub critical: Vec<usize>,
    pub noisy: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct GraphSummary {
    pub class_id: usize,
    pub samples: usize,
    pub layers: Vec<LayerSummary>,
    pub dot: String,
}

pub struct Session {
    net: Network,
    /// Graphs are inferred on this set.
    val: LabeledDataset,
    /// Inputs shown on the page.
    test: LabeledDataset,
    graphs: BTreeMap<usize, (CausalGraph, NoisyRegistry)>,
}

impl Session {
    pub fn load() -> Result<Self, String> {
        let net = io::model_from_bytes(MODEL).map_err(|e| e.to_string())?;
        let val = io::idx_from_bytes(VAL_IMAGES, VAL_LABELS, 255.0).map_err(|e| e.to_string())?;
        let test = io::idx_from_bytes(TEST_IMAGES, TEST_LABELS, 255.0).map_err(|e| e.to_string())?;
        Ok(Self { net, val, test, graphs: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.test.is_empty()
    }

    fn check_index(&self, i: usize) -> Result<(), String> {
        if i >= self.test.len() {
            return Err(format!("sample {i} out of range for {} samples", self.test.len()));
        }
        Ok(())
    }

    /// Pixels of test sample `i` in `[0, 1]`, row-major.
    pub fn image(&self, i: usize) -> Result<Vec<f32>, String> {
        self.check_index(i)?;
        Ok(self.test.images.item(i).to_vec())
    }

    pub fn predict(&self, i: usize) -> Result<Prediction, String> {
        self.check_index(i)?;
        let logits = self.net.forward(&self.test.sample(i)).map_err(|e| e.to_string())?;
        let z = logits.item(0);
        let top = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exp: Vec<f64> = z.iter().map(|v| (*v as f64 - top).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Ok(Prediction {
            label: self.test.labels[i],
            predicted: argmax(z),
            probabilities: exp.iter().map(|e| e / sum).collect(),
        })
    }

    fn ensure_graph(&mut self, k: usize) -> Result<(), String> {
        if !self.graphs.contains_key(&k) {
            let class = self.val.filter_by_class(k, self.net.num_classes()).map_err(|e| e.to_string())?;
            let g = infer_graph(&self.net, &class.images, k, &InterventionPolicy::binary(), &TestConfig::default(), SEED)
                .map_err(|e| e.to_string())?;
            self.graphs.insert(k, g);
        }
        Ok(())
    }

    /// Binary-intervention graph of class `k`, inferred once and cached.
    pub fn graph(&mut self, k: usize) -> Result<&(CausalGraph, NoisyRegistry), String> {
        self.ensure_graph(k)?;
        Ok(&self.graphs[&k])
    }

    pub fn graph_summary(&mut self, k: usize) -> Result<GraphSummary, String> {
        let samples = self.val.labels.iter().filter(|&&l| l == k).count();
        self.ensure_graph(k)?;
        let (g, d) = &self.graphs[&k];
        let layers = g
            .layers
            .iter()
            .map(|l| LayerSummary {
                layer: l.layer,
                nodes: self.net.nodes(l.layer).unwrap_or(0),
                critical: l.critical_nodes(),
                noisy: l.noisy().iter().map(|n| n.node).collect(),
            })
            .collect();
        Ok(GraphSummary { class_id: k, samples, layers, dot: graph_to_dot(g, d) })
    }

    pub fn saliency(&mut self, i: usize, k: usize, method: Method) -> Result<SaliencyMap, String> {
        self.check_index(i)?;
        let x = self.test.sample(i);
        match method {
            Method::Causal => {
                let layer = default_explain_layer(&self.net);
                self.ensure_graph(k)?;
                aggregate_saliency(&self.net, &x, &self.graphs[&k].0, layer).map_err(|e| e.to_string())
            }
            Method::Occlusion => occlusion_baseline(&self.net, &x, k, (4, 4), (2, 2), 0.0).map_err(|e| e.to_string()),
        }
    }

    pub fn peaks(&mut self, i: usize, k: usize, method: Method) -> Result<PeakSet, String> {
        let map = self.saliency(i, k, method)?;
        Ok(find_peaks(&map.values, map.height, map.width))
    }
}

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsValue> {
        Session::load().map(|session| Demo { session }).map_err(js_err)
    }

    #[wasm_bindgen(js_name = sampleCount)]
    pub fn sample_count(&self) -> usize {
        self.session.len()
    }

    pub fn image(&self, i: usize) -> Result<Vec<f32>, JsValue> {
        self.session.image(i).map_err(js_err)
    }

    /// `{label, predicted, probabilities}` as JSON.
    pub fn predict(&self, i: usize) -> Result<String, JsValue> {
        self.session.predict(i).map(|p| to_json(&p)).map_err(js_err)
    }

    /// `{class_id, samples, layers: [{layer, nodes, critical, noisy}], dot}`.
    #[wasm_bindgen(js_name = inferGraph)]
    pub fn infer_graph(&mut self, k: usize) -> Result<String, JsValue> {
        self.session.graph_summary(k).map(|s| to_json(&s)).map_err(js_err)
    }

    /// 28x28 map in `[0, 1]`.
    pub fn saliency(&mut self, i: usize, k: usize, method: &str) -> Result<Vec<f32>, JsValue> {
        let method = Method::parse(method).map_err(js_err)?;
        self.session.saliency(i, k, method).map(|m| m.values).map_err(js_err)
    }

    /// `{peaks: [{row, col, score}], absolute_max}` as JSON.
    pub fn peaks(&mut self, i: usize, k: usize, method: &str) -> Result<String, JsValue> {
        let method = Method::parse(method).map_err(js_err)?;
        self.session.peaks(i, k, method).map(|p| to_json(&p)).map_err(js_err)
    }
}
