#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use ceg_core::io::{self, LabeledDataset};
use ceg_core::{LayerKind, LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn lenet() -> Network {
    io::load_model(fixture("lenet.cegm")).unwrap()
}

pub fn val_set() -> LabeledDataset {
    io::load_idx(fixture("val-images-idx3-ubyte"), fixture("val-labels-idx1-ubyte"), 255.0).unwrap()
}

pub fn test_set() -> LabeledDataset {
    io::load_idx(fixture("test-images-idx3-ubyte"), fixture("test-labels-idx1-ubyte"), 255.0).unwrap()
}

pub fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// 2 inputs, 2 hidden, 2 outputs, identity weights, no bias.
pub fn identity_222() -> Network {
    let eye = t(&[2, 2], &[1., 0., 0., 1.]);
    Network::new(
        vec![LayerSpec::dense("fc1", eye.clone(), None), LayerSpec::dense("fc2", eye, None)],
        vec![2],
        2,
        None,
    )
    .unwrap()
}

/// Three hidden units over a positive input. The class-0 logit reads unit 0
/// with weight +1 (live path) and unit 2 with weight -1 (antagonist); unit 1
/// feeds only class 1.
pub fn one_live_path() -> Network {
    let fc1 = t(&[3, 2], &[1., 0., 0., 1., 0.5, 0.5]);
    let fc2 = t(&[2, 3], &[1., 0., -1., 0., 1., 0.]);
    Network::new(
        vec![
            LayerSpec::dense("fc1", fc1, None),
            LayerSpec::relu("relu1"),
            LayerSpec::dense("fc2", fc2, None),
        ],
        vec![2],
        2,
        None,
    )
    .unwrap()
}

/// `n` positive inputs of width 2 with varied magnitudes.
pub fn positive_inputs(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..2 * n).map(|_| rng.random_range(0.5f32..2.0)).collect();
    t(&[n, 2], &data)
}

/// A small conv + dense net with random weights:
/// conv(1->2, 3x3, pad 1) relu maxpool2 | flatten dense(8->3) relu | dense(3->2).
pub fn random_small_net(rng: &mut ChaCha8Rng) -> Network {
    let mut w = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
    };
    let conv = LayerSpec::conv2d("conv", w(&[2, 1, 3, 3]), Some(w(&[2])), [1, 1], [1, 1]);
    let fc1 = LayerSpec::dense("fc1", w(&[3, 8]), Some(w(&[3])));
    let fc2 = LayerSpec::dense("fc2", w(&[2, 3]), Some(w(&[2])));
    Network::new(
        vec![
            conv,
            LayerSpec::relu("r1"),
            LayerSpec::maxpool2d("p1", [2, 2], [2, 2]),
            LayerSpec::flatten("f"),
            fc1,
            LayerSpec::relu("r2"),
            fc2,
        ],
        vec![1, 4, 4],
        2,
        None,
    )
    .unwrap()
}

/// Straightforward f64 forward pass over a layer list, one item at a time.
/// Shares no code with the library engine.
pub fn naive_forward(layers: &[LayerSpec], input_shape: &[usize], item: &[f32]) -> Vec<f64> {
    let mut shape = input_shape.to_vec();
    let mut x: Vec<f64> = item.iter().map(|v| *v as f64).collect();
    for layer in layers {
        match layer.kind {
            LayerKind::Dense => {
                let w = layer.weight.as_ref().unwrap();
                let (o, i) = (w.shape()[0], w.shape()[1]);
                let mut y = vec![0.0; o];
                for r in 0..o {
                    let mut acc = layer.bias.as_ref().map_or(0.0, |b| b.data()[r] as f64);
                    for c in 0..i {
                        acc += w.data()[r * i + c] as f64 * x[c];
                    }
                    y[r] = acc;
                }
                x = y;
                shape = vec![o];
            }
            LayerKind::Conv2d => {
                let w = layer.weight.as_ref().unwrap();
                let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (h, wd) = (shape[1], shape[2]);
                let (s, p) = (layer.stride, layer.padding);
                let oh = (h + 2 * p[0] - kh) / s[0] + 1;
                let ow = (wd + 2 * p[1] - kw) / s[1] + 1;
                let mut y = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = layer.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                            for i in 0..ci {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let yy = (r * s[0] + u) as isize - p[0] as isize;
                                        let xx = (c * s[1] + v) as isize - p[1] as isize;
                                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        let wv = w.data()[((o * ci + i) * kh + u) * kw + v] as f64;
                                        acc += wv * x[(i * h + yy as usize) * wd + xx as usize];
                                    }
                                }
                            }
                            y[(o * oh + r) * ow + c] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![co, oh, ow];
            }
            LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::Maxpool2d | LayerKind::Avgpool2d => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let (k, s) = (layer.kernel, layer.stride);
                let oh = (h - k[0]) / s[0] + 1;
                let ow = (wd - k[1]) / s[1] + 1;
                let mut y = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let cells = (0..k[0]).flat_map(|u| (0..k[1]).map(move |v| (u, v)));
                            let vals: Vec<f64> = cells
                                .map(|(u, v)| x[(ch * h + r * s[0] + u) * wd + col * s[1] + v])
                                .collect();
                            y.push(if layer.kind == LayerKind::Maxpool2d {
                                vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.iter().sum::<f64>() / vals.len() as f64
                            });
                        }
                    }
                }
                x = y;
                shape = vec![c, oh, ow];
            }
            LayerKind::Flatten => shape = vec![x.len()],
        }
    }
    x
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
