//! Binary model files.
//!
//! Layout:
//!
//! | bytes      | content                                         |
//! |------------|-------------------------------------------------|
//! | 0..4       | magic `SPMG`                                    |
//! | 4..8       | format version, `u32` little-endian (= 1)       |
//! | 8..12      | header length `N`, `u32` little-endian          |
//! | 12..12+N   | UTF-8 JSON header                               |
//! | 12+N..     | little-endian `f32` blobs in header order       |
//!
//! Blob offsets in the header are relative to the first blob byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Conv2d, Dense, Layer, MaxPool, ModelGraph, Padding};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"SPMG";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    spec: LayerHeader,
    weights: Vec<WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Conv2d {
        id: String,
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        id: String,
        channels: usize,
        eps: f32,
    },
    Relu {
        id: String,
    },
    MaxPool {
        id: String,
        pool: usize,
        stride: usize,
    },
    Flatten {
        id: String,
    },
    Dense {
        id: String,
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    length: u64,
}

/// Serializes a graph to the binary model format.
pub fn to_bytes(graph: &ModelGraph) -> Vec<u8> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let mut weights = Vec::new();
        for (name, tensor) in layer.weights() {
            let offset = blobs.len() as u64;
            for v in tensor.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            weights.push(WeightEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                dtype: DType::F32,
                offset,
                length: blobs.len() as u64 - offset,
            });
        }
        layers.push(LayerEntry {
            spec: layer_header(layer),
            weights,
        });
    }
    let header = Header {
        input_shape: graph.input_shape,
        num_classes: graph.num_classes,
        layers,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(graph))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected `SPMG`"));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated before version"));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(8, "truncated before header length"));
    }
    let header_len = read_u32(bytes, 8) as usize;
    let blob_start = PREAMBLE + header_len;
    if bytes.len() < blob_start {
        return Err(Error::format(
            8,
            format!("header length {header_len} exceeds file size {}", bytes.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..blob_start])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("invalid header: {e}")))?;
    let blobs = &bytes[blob_start..];

    let mut expected_end = 0u64;
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in header.layers {
        let mut tensors = Vec::with_capacity(entry.weights.len());
        for w in &entry.weights {
            let abs = blob_start as u64 + w.offset;
            if w.dtype != DType::F32 {
                return Err(Error::format(abs, format!("`{}` has unsupported dtype {:?}", w.name, w.dtype)));
            }
            let elements: usize = w.shape.iter().product();
            if w.length != 4 * elements as u64 {
                return Err(Error::format(
                    abs,
                    format!("`{}` declares {} bytes for shape {:?}", w.name, w.length, w.shape),
                ));
            }
            let end = w.offset.checked_add(w.length).filter(|&e| e <= blobs.len() as u64);
            let Some(end) = end else {
                return Err(Error::format(
                    abs,
                    format!("blob `{}` runs past end of file ({} bytes)", w.name, bytes.len()),
                ));
            };
            let data = blobs[w.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((w.name.as_str(), Tensor::new(w.shape.clone(), data)?));
            expected_end = expected_end.max(end);
        }
        layers.push(build_layer(entry.spec, tensors, blob_start as u64)?);
    }
    if expected_end != blobs.len() as u64 {
        return Err(Error::format(
            blob_start as u64 + expected_end,
            "trailing bytes after last blob",
        ));
    }
    let graph = ModelGraph {
        layers,
        input_shape: header.input_shape,
        num_classes: header.num_classes,
    };
    graph.infer_shapes(1)?;
    Ok(graph)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn layer_header(layer: &Layer) -> LayerHeader {
    match layer {
        Layer::Conv2d(c) => LayerHeader::Conv2d {
            id: c.id.clone(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel_h: c.kernel_h,
            kernel_w: c.kernel_w,
            stride: c.stride,
            padding: c.padding,
        },
        Layer::BatchNorm(b) => LayerHeader::BatchNorm {
            id: b.id.clone(),
            channels: b.channels,
            eps: b.eps,
        },
        Layer::Relu { id } => LayerHeader::Relu { id: id.clone() },
        Layer::MaxPool(p) => LayerHeader::MaxPool {
            id: p.id.clone(),
            pool: p.pool,
            stride: p.stride,
        },
        Layer::Flatten { id } => LayerHeader::Flatten { id: id.clone() },
        Layer::Dense(d) => LayerHeader::Dense {
            id: d.id.clone(),
            in_features: d.in_features,
            out_features: d.out_features,
        },
    }
}

fn build_layer(spec: LayerHeader, tensors: Vec<(&str, Tensor)>, blob_start: u64) -> Result<Layer> {
    let take = |name: &str, id: &str| -> Result<Tensor> {
        tensors
            .iter()
            .position(|(n, _)| *n == name)
            .map(|i| tensors[i].1.clone())
            .ok_or_else(|| Error::format(blob_start, format!("layer `{id}` is missing weight `{name}`")))
    };
    Ok(match spec {
        LayerHeader::Conv2d {
            id,
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => Layer::Conv2d(Conv2d {
            weights: take("weights", &id)?,
            bias: take("bias", &id)?,
            id,
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        }),
        LayerHeader::BatchNorm { id, channels, eps } => Layer::BatchNorm(BatchNorm {
            gamma: take("gamma", &id)?,
            beta: take("beta", &id)?,
            moving_mean: take("moving_mean", &id)?,
            moving_var: take("moving_var", &id)?,
            id,
            channels,
            eps,
        }),
        LayerHeader::Relu { id } => Layer::Relu { id },
        LayerHeader::MaxPool { id, pool, stride } => Layer::MaxPool(MaxPool { id, pool, stride }),
        LayerHeader::Flatten { id } => Layer::Flatten { id },
        LayerHeader::Dense {
            id,
            in_features,
            out_features,
        } => Layer::Dense(Dense {
            weights: take("weights", &id)?,
            bias: take("bias", &id)?,
            id,
            in_features,
            out_features,
        }),
    })
}
