//! Tiled-layout memory and step-time estimates for TPU-like accelerators.
//!
//! Accelerator layouts store the two minor-most dimensions of every tensor
//! in fixed tiles (by default 8 × 128 of `f32`), so a dimension is charged at
//! the next multiple of its tile edge. Shrinking a channel count only saves
//! memory when it crosses a tile boundary, which makes memory and time a
//! staircase in the number of pruned channels rather than a straight line.
//!
//! This is a fixed-tile approximation of a compiler's layout choice, not a
//! simulation of one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub minor_multiple: usize,
    pub second_minor_multiple: usize,
    pub bytes_per_element: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            minor_multiple: 128,
            second_minor_multiple: 8,
            bytes_per_element: 4,
        }
    }
}

impl LayoutConfig {
    /// A layout that pads nothing.
    pub fn unpadded() -> Self {
        Self {
            minor_multiple: 1,
            second_minor_multiple: 1,
            bytes_per_element: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minor_multiple == 0 || self.second_minor_multiple == 0 || self.bytes_per_element == 0 {
            return Err(Error::Config("layout multiples and element size must be >= 1".into()));
        }
        Ok(())
    }

    /// Padded element count of a tensor with the given shape.
    pub fn padded_elements(&self, shape: &[usize]) -> usize {
        let mut dims = shape.to_vec();
        let r = dims.len();
        if r >= 1 {
            dims[r - 1] = padded_dim_unchecked(dims[r - 1], self.minor_multiple);
        }
        if r >= 2 {
            dims[r - 2] = padded_dim_unchecked(dims[r - 2], self.second_minor_multiple);
        }
        dims.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    pub flops_per_second: f64,
    pub bytes_per_second: f64,
    pub fixed_overhead_seconds: f64,
}

impl Default for DeviceProfile {
    /// Roughly one TPU v2 core.
    fn default() -> Self {
        Self {
            flops_per_second: 22.5e12,
            bytes_per_second: 300e9,
            fixed_overhead_seconds: 1e-4,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops_per_second > 0.0 && self.bytes_per_second > 0.0) {
            return Err(Error::Config("device throughputs must be positive".into()));
        }
        if !(self.fixed_overhead_seconds >= 0.0) {
            return Err(Error::Config("fixed overhead must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedBytes {
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub total: u64,
}

/// Smallest multiple of `multiple` that is at least `n`.
pub fn padded_dim(n: usize, multiple: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if multiple == 0 {
        return Err(Error::invalid("multiple must be positive"));
    }
    Ok(padded_dim_unchecked(n, multiple))
}

fn padded_dim_unchecked(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Bytes charged for every weight tensor plus every layer output at `batch`,
/// each padded to the tile layout. All outputs are counted as live at once.
pub fn padded_bytes(graph: &ModelGraph, layout: &LayoutConfig, batch: usize) -> Result<PaddedBytes> {
    layout.validate()?;
    let bpe = layout.bytes_per_element as u64;
    let weight_bytes: u64 = graph
        .layers
        .iter()
        .flat_map(|l| l.weights())
        .map(|(_, t)| layout.padded_elements(t.shape()) as u64 * bpe)
        .sum();
    let mut activation_bytes = 0u64;
    for shape in graph.infer_shapes(batch)? {
        activation_bytes += layout.padded_elements(&shape) as u64 * bpe;
    }
    Ok(PaddedBytes {
        weight_bytes,
        activation_bytes,
        total: weight_bytes + activation_bytes,
    })
}

/// Forward-pass floating point operations at `batch`.
///
/// Convolutions cost `2·kh·kw·Cin·Cout·Hout·Wout` per sample and dense layers
/// `2·in·out`; batch norm is charged 2 per output element, ReLU 1, max
/// pooling one comparison per window element.
pub fn flop_count(graph: &ModelGraph, batch: usize) -> Result<u64> {
    let shapes = graph.infer_shapes(batch)?;
    let mut total = 0u64;
    for (layer, out) in graph.layers.iter().zip(&shapes) {
        let elems: u64 = out.iter().product::<usize>() as u64;
        total += match layer {
            Layer::Conv2d(c) => {
                2 * (c.kernel_h * c.kernel_w * c.in_channels * c.out_channels) as u64 * (out[1] * out[2]) as u64 * batch as u64
            }
            Layer::Dense(d) => 2 * (d.in_features * d.out_features) as u64 * batch as u64,
            Layer::BatchNorm(_) => 2 * elems,
            Layer::Relu { .. } => elems,
            Layer::MaxPool(p) => (p.pool * p.pool) as u64 * elems,
            Layer::Flatten { .. } => 0,
        };
    }
    Ok(total)
}

/// Estimated training step time in seconds:
/// `overhead + 3·flops / flops_per_second + padded_bytes / bytes_per_second`.
///
/// The factor 3 folds the backward pass (about twice the forward) and the
/// update into one term.
pub fn estimate_step_time(graph: &ModelGraph, layout: &LayoutConfig, profile: &DeviceProfile, batch: usize) -> Result<f64> {
    profile.validate()?;
    let flops = flop_count(graph, batch)? as f64;
    let bytes = padded_bytes(graph, layout, batch)?.total as f64;
    Ok(profile.fixed_overhead_seconds + 3.0 * flops / profile.flops_per_second + bytes / profile.bytes_per_second)
}
