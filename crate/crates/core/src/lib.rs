//! Structured channel pruning for small convolutional networks.
//!
//! Models are chains of convolution, batch norm, ReLU, max pool, flatten and
//! dense layers ([`graph::ModelGraph`]). Channels are ranked
//! ([`importance`]), physically removed ([`surgery`]), and the smaller model
//! is fine-tuned with the built-in CPU engine ([`engine`]). The
//! [`costmodel`] charges memory the way tiled accelerator layouts do, and
//! [`harness`] runs whole sweeps.

pub mod costmodel;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;
pub mod importance;
pub mod io;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Layer, ModelGraph, Preset};
pub use importance::{ImportanceReport, Method, PrunePlan, Scope};
pub use surgery::WeightPolicy;
pub use tensor::{DType, Tensor};
