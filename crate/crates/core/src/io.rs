//! Model and dataset file formats.
//!
//! CEGM v1 layout:
//!
//! ```text
//! "CEGM" | version: u32 LE (=1) | header_len: u64 LE | header: UTF-8 JSON | blob
//! ```
//!
//! The header is canonical JSON (sorted keys, no whitespace) holding
//! `input_shape`, `num_classes`, optional `preprocess` and the ordered
//! `layers`. Each parameter is `{count, offset, shape}` with `offset` in bytes
//! from the start of the blob. The blob is raw little-endian `f32`.
//!
//! IDX files use big-endian headers with magics 2051 (images) and 2049
//! (labels) and unsigned byte payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, Network, Preprocess};
use crate::tensor::Tensor;

pub const CEGM_MAGIC: &[u8; 4] = b"CEGM";
pub const CEGM_VERSION: u32 = 1;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamRef {
    count: usize,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<ParamRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<ParamRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerHeader>,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preprocess: Option<Preprocess>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(net)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 || &bytes[..4] != CEGM_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            what: "model".into(),
            expected: "CEGM".into(),
            found,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader("file shorter than the fixed preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CEGM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::MalformedHeader(format!("header length {header_len} exceeds file size"))
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let blob = &bytes[header_end..];

    let mut next_free = 0u64;
    let mut read_param = |p: &ParamRef, what: &str| -> Result<Tensor> {
        let expected: usize = p.shape.iter().product();
        if expected != p.count {
            return Err(Error::ShapeMismatch(format!(
                "{what}: shape {:?} holds {expected} elements, header says {}",
                p.shape, p.count
            )));
        }
        if p.offset < next_free {
            return Err(Error::MalformedHeader(format!(
                "{what}: offset {} overlaps or precedes the previous parameter",
                p.offset
            )));
        }
        let end = (p.count as u64)
            .checked_mul(4)
            .and_then(|n| n.checked_add(p.offset))
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                Error::TruncatedBlob(format!(
                    "{what}: bytes {}..+{} past blob end {}",
                    p.offset,
                    p.count * 4,
                    blob.len()
                ))
            })?;
        next_free = end;
        let data = blob[p.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(p.shape.clone(), data)
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let weight = lh
            .weight
            .as_ref()
            .map(|p| read_param(p, &format!("{}.weight", lh.name)))
            .transpose()?;
        let bias = lh
            .bias
            .as_ref()
            .map(|p| read_param(p, &format!("{}.bias", lh.name)))
            .transpose()?;
        layers.push(LayerSpec {
            name: lh.name.clone(),
            kind: lh.kind,
            weight,
            bias,
            stride: lh.stride.unwrap_or([1, 1]),
            padding: lh.padding.unwrap_or([0, 0]),
            kernel: lh.kernel.unwrap_or([1, 1]),
        });
    }
    Network::new(layers, header.input_shape, header.num_classes, header.preprocess)
}

pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut blob: Vec<u8> = Vec::new();
    let mut put = |t: &Tensor, what: &str| -> Result<ParamRef> {
        if !t.is_finite() {
            return Err(Error::RejectedInvalid(format!("{what} holds non-finite values")));
        }
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(ParamRef {
            count: t.len(),
            offset,
            shape: t.shape().to_vec(),
        })
    };

    let mut layers = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let weight = l
            .weight
            .as_ref()
            .map(|w| put(w, &format!("{}.weight", l.name)))
            .transpose()?;
        let bias = l
            .bias
            .as_ref()
            .map(|b| put(b, &format!("{}.bias", l.name)))
            .transpose()?;
        let (stride, padding, kernel) = match l.kind {
            LayerKind::Conv2d => (Some(l.stride), Some(l.padding), None),
            LayerKind::Maxpool2d | LayerKind::Avgpool2d => (Some(l.stride), None, Some(l.kernel)),
            _ => (None, None, None),
        };
        layers.push(LayerHeader {
            name: l.name.clone(),
            kind: l.kind,
            weight,
            bias,
            stride,
            padding,
            kernel,
        });
    }
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        layers,
        num_classes: net.num_classes(),
        preprocess: net.preprocess().cloned(),
    };
    let text = canonical_json(&header)?;

    let mut out = Vec::with_capacity(16 + text.len() + blob.len());
    out.extend_from_slice(CEGM_MAGIC);
    out.extend_from_slice(&CEGM_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap.
    let value =
        serde_json::to_value(value).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| Error::MalformedHeader(e.to_string()))
}

/// Images `[N, 1, H, W]` scaled by `1/divide`, with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-item image shape, e.g. `[1, 28, 28]`.
    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Single image as a batch of one.
    pub fn sample(&self, i: usize) -> Tensor {
        self.images.select(&[i])
    }

    /// The samples labelled `class`, in their original order.
    pub fn filter_by_class(&self, class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange { class, num_classes });
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        Ok(self.subset(&idx))
    }
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    divide: f64,
) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    idx_from_bytes(&images, &labels, divide)
}

pub fn idx_from_bytes(images: &[u8], labels: &[u8], divide: f64) -> Result<LabeledDataset> {
    if !(divide > 0.0 && divide.is_finite()) {
        return Err(Error::InvalidArgument(format!("divide must be positive, got {divide}")));
    }
    let be = |b: &[u8], at: usize| -> Option<u32> {
        b.get(at..at + 4)
            .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
    };
    let check_magic = |b: &[u8], expected: u32, what: &str| -> Result<()> {
        match be(b, 0) {
            Some(m) if m == expected => Ok(()),
            found => Err(Error::BadMagic {
                what: what.into(),
                expected: format!("{expected:#010x}"),
                found: found.map_or_else(|| "<eof>".to_string(), |m| format!("{m:#010x}")),
            }),
        }
    };
    check_magic(images, IDX_IMAGES_MAGIC, "IDX images")?;
    check_magic(labels, IDX_LABELS_MAGIC, "IDX labels")?;
    let (Some(n), Some(rows), Some(cols)) = (be(images, 4), be(images, 8), be(images, 12)) else {
        return Err(Error::MalformedHeader("IDX images header truncated".into()));
    };
    let Some(n_labels) = be(labels, 4) else {
        return Err(Error::MalformedHeader("IDX labels header truncated".into()));
    };
    let (n, rows, cols, n_labels) = (n as usize, rows as usize, cols as usize, n_labels as usize);
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = n * rows * cols;
    let Some(px) = images.get(16..16 + pixels) else {
        return Err(Error::TruncatedBlob(format!(
            "IDX images declare {pixels} pixels, file holds {}",
            images.len().saturating_sub(16)
        )));
    };
    let Some(lb) = labels.get(8..8 + n) else {
        return Err(Error::TruncatedBlob(format!(
            "IDX labels declare {n} entries, file holds {}",
            labels.len().saturating_sub(8)
        )));
    };
    let data = px.iter().map(|&p| (p as f64 / divide) as f32).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    LabeledDataset::new(images, lb.iter().map(|&l| l as usize).collect())
}

/// Encodes images (values in `[0, 1]` after scaling by `divide`) and labels
/// as an IDX pair.
pub fn idx_to_bytes(ds: &LabeledDataset, divide: f64) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "IDX images must be [N, 1, H, W], got {shape:?}"
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, shape[0] as u32, shape[2] as u32, shape[3] as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v as f64 * divide).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let byte = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}
