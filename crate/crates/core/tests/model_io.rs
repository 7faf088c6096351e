use std::path::PathBuf;

use ceg_core::io::{self, LabeledDataset};
use ceg_core::{Error, LayerKind, Network, Tensor};
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn lenet() -> Network {
    io::load_model(fixture("lenet.cegm")).unwrap()
}

fn test_set() -> LabeledDataset {
    io::load_idx(fixture("test-images-idx3-ubyte"), fixture("test-labels-idx1-ubyte"), 255.0).unwrap()
}

const LENET_SHA256: &str = "79a83b977c64c2ea3a1484753554d18f28d54fbb5d4833dd38fa3acce4add427";

#[test]
fn lenet_fixture_structure() {
    let net = lenet();
    assert_eq!(net.graph_layers(), 5);
    assert_eq!(net.num_classes(), 10);
    let nodes: Vec<usize> = (1..=5).map(|l| net.nodes(l).unwrap()).collect();
    assert_eq!(nodes, vec![6, 16, 120, 84, 10]);
    let kinds: Vec<LayerKind> = (1..=5).map(|l| net.graph_layer_spec(l).unwrap().kind).collect();
    assert_eq!(
        kinds,
        vec![LayerKind::Conv2d, LayerKind::Conv2d, LayerKind::Dense, LayerKind::Dense, LayerKind::Dense]
    );
    assert_eq!(net.graph_layer(1).unwrap().trace_shape, vec![6, 14, 14]);
    assert_eq!(net.graph_layer(2).unwrap().trace_shape, vec![400]);
    assert_eq!(net.graph_layer(2).unwrap().node_plane, Some((5, 5)));
}

#[test]
fn golden_file_hash_and_byte_round_trip() {
    let raw = std::fs::read(fixture("lenet.cegm")).unwrap();
    assert_eq!(hex(&Sha256::digest(&raw)), LENET_SHA256);
    let rewritten = io::model_to_bytes(&lenet()).unwrap();
    assert_eq!(rewritten, raw, "canonical header must round-trip byte-for-byte");
}

#[test]
fn save_then_load_gives_identical_forward() {
    let net = lenet();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.cegm");
    io::save_model(&net, &path).unwrap();
    let back = io::load_model(&path).unwrap();
    assert_eq!(back, net);
    let batch = test_set().subset(&(0..10).collect::<Vec<_>>()).images;
    let a = net.forward(&batch).unwrap();
    let b = back.forward(&batch).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn matches_reference_logits() {
    #[derive(serde::Deserialize)]
    struct Reference {
        images: usize,
        logits: Vec<Vec<f64>>,
    }
    let text = std::fs::read_to_string(fixture("lenet_test_logits.json")).unwrap();
    let reference: Reference = serde_json::from_str(&text).unwrap();
    let batch = test_set().subset(&(0..reference.images).collect::<Vec<_>>()).images;
    let logits = lenet().forward(&batch).unwrap();
    let mut worst = 0f64;
    for (i, row) in reference.logits.iter().enumerate() {
        for (a, b) in logits.item(i).iter().zip(row) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    assert!(worst <= 1e-4, "max |logit difference| = {worst}");
}

#[test]
fn traced_forward_agrees_with_forward() {
    let net = lenet();
    let batch = test_set().subset(&[0, 1, 2]).images;
    let (logits, trace) = net.forward_traced(&batch).unwrap();
    assert_eq!(trace.len(), 5);
    assert_eq!(logits, net.forward(&batch).unwrap());
    assert_eq!(trace.layer(5), &logits);
    assert_eq!(trace.layer(1).shape(), &[3, 6, 14, 14]);

    let (empty, trace) = net.forward_traced(&Tensor::zeros(vec![0, 1, 28, 28])).unwrap();
    assert_eq!(empty.shape(), &[0, 10]);
    assert!(trace.entries().iter().all(|t| t.batch() == 0));
}

#[test]
fn fixture_accuracy_is_reasonable() {
    let ds = test_set();
    let logits = lenet().forward(&ds.images).unwrap();
    let correct = (0..ds.len())
        .filter(|&i| argmax(logits.item(i)) == ds.labels[i])
        .count();
    assert!(correct as f64 / ds.len() as f64 > 0.95);
}

/// Independent reader: walks the raw bytes without the library.
#[test]
fn idx_reader_matches_minimal_parser() {
    let images = std::fs::read(fixture("test-images-idx3-ubyte")).unwrap();
    let labels = std::fs::read(fixture("test-labels-idx1-ubyte")).unwrap();
    assert_eq!(&images[..4], &[0, 0, 8, 3]);
    assert_eq!(&labels[..4], &[0, 0, 8, 1]);
    let ds = test_set();
    assert_eq!(ds.images.shape(), &[512, 1, 28, 28]);
    for r in 0..100 {
        assert_eq!(ds.labels[r], labels[8 + r] as usize);
        let px = &images[16 + r * 784..16 + (r + 1) * 784];
        for (a, b) in ds.images.item(r).iter().zip(px) {
            assert_eq!(*a, (*b as f64 / 255.0) as f32);
        }
    }
    let max = ds.images.data().iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(max, 1.0);
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn missing_file_names_path() {
    let err = io::load_model("/nonexistent/model.cegm").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/model.cegm"));
}

/// Full MNIST test files, when available via `CEG_MNIST_DIR`.
#[test]
fn full_mnist_test_set_when_present() {
    let Ok(dir) = std::env::var("CEG_MNIST_DIR") else {
        eprintln!("CEG_MNIST_DIR not set; skipping full MNIST check");
        return;
    };
    let dir = PathBuf::from(dir);
    let ds = io::load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), 255.0)
        .unwrap();
    assert_eq!(ds.images.shape(), &[10000, 1, 28, 28]);
    assert_eq!(ds.filter_by_class(3, 10).unwrap().len(), 1010);
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
