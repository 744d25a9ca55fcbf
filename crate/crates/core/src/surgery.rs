//! Builds pruned graphs from a [`PrunePlan`].
//!
//! Removing output channel `c` of a convolution touches every consumer of
//! that channel:
//!
//! * the convolution's own filter slice `[.., .., .., c]` and bias entry;
//! * the following batch norm's `γ`, `β` and moving statistics at `c`;
//! * the next convolution's input slice `[.., .., c, ..]`, or, across a
//!   flatten, every dense input row `(h·W + w)·C + c` (NHWC order, with `H`,
//!   `W`, `C` the pre-pruning flatten input dimensions).
//!
//! Max pooling and ReLU pass channels through unchanged.

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::importance::PrunePlan;
use crate::tensor::Tensor;

/// What happens to surviving weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// Copy every surviving value from the original.
    Reload,
    /// Keep only the structure and draw fresh weights.
    Reinit { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dependency {
    BnSlice,
    Pass,
    InputSlice,
    FlattenRemap,
}

/// Downstream layers affected when a convolution loses output channels, in
/// chain order.
pub fn consumer_map(graph: &ModelGraph) -> Result<IndexMap<String, Vec<(String, Dependency)>>> {
    let flattens: Vec<&str> = graph
        .layers
        .iter()
        .filter(|l| matches!(l, Layer::Flatten { .. }))
        .map(Layer::id)
        .collect();
    if flattens.len() > 1 {
        return Err(Error::structure(flattens[1], "a chain may contain only one flatten"));
    }
    let mut map = IndexMap::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let Layer::Conv2d(conv) = layer else { continue };
        let mut deps = Vec::new();
        let mut after_flatten = false;
        let mut terminal = false;
        for next in &graph.layers[i + 1..] {
            let id = next.id().to_string();
            match next {
                Layer::BatchNorm(_) if !after_flatten => deps.push((id, Dependency::BnSlice)),
                Layer::Relu { .. } | Layer::MaxPool(_) if !after_flatten => deps.push((id, Dependency::Pass)),
                Layer::Conv2d(_) if !after_flatten => {
                    deps.push((id, Dependency::InputSlice));
                    terminal = true;
                }
                Layer::Flatten { .. } if !after_flatten => {
                    deps.push((id, Dependency::Pass));
                    after_flatten = true;
                    continue;
                }
                Layer::Dense(_) if after_flatten => {
                    deps.push((id, Dependency::FlattenRemap));
                    terminal = true;
                }
                other => {
                    return Err(Error::structure(
                        other.id(),
                        format!("cannot carry channels of `{}` through a {}", conv.id, other.kind()),
                    ))
                }
            }
            if terminal {
                break;
            }
        }
        if !terminal {
            return Err(Error::structure(&conv.id, "convolution output has no consumer"));
        }
        map.insert(conv.id.clone(), deps);
    }
    Ok(map)
}

fn check_plan(graph: &ModelGraph, plan: &PrunePlan) -> Result<()> {
    let actual = graph.fingerprint();
    if plan.source_graph_fingerprint != actual {
        return Err(Error::PlanMismatch {
            expected: plan.source_graph_fingerprint.clone(),
            actual,
        });
    }
    for (id, indices) in &plan.removals {
        let invalid = |detail: String| Error::InvalidPlan {
            layer: id.clone(),
            detail,
        };
        let Some(Layer::Conv2d(conv)) = graph.layer(id) else {
            return Err(invalid("not a convolution in this graph".into()));
        };
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("indices must be strictly increasing".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= conv.out_channels {
                return Err(invalid(format!("index {last} out of range for {} channels", conv.out_channels)));
            }
        }
        if indices.len() >= conv.out_channels {
            return Err(invalid("at least one channel must survive".into()));
        }
    }
    Ok(())
}

fn complement(n: usize, removed: &[usize]) -> Vec<usize> {
    let mut it = removed.iter().peekable();
    (0..n)
        .filter(|i| {
            if it.peek() == Some(&i) {
                it.next();
                false
            } else {
                true
            }
        })
        .collect()
}

/// Returns a new, smaller graph with the planned channels removed. The
/// original is untouched.
pub fn apply_plan(original: &ModelGraph, plan: &PrunePlan, policy: WeightPolicy) -> Result<ModelGraph> {
    check_plan(original, plan)?;
    let shapes = original.infer_shapes(1)?;
    let mut layers = Vec::with_capacity(original.layers.len());
    // Surviving channel indices of the activation flowing forward, when
    // pruned.
    let mut channels: Option<Vec<usize>> = None;
    // Surviving dense input rows after a flatten.
    let mut rows: Option<Vec<usize>> = None;

    for (i, layer) in original.layers.iter().enumerate() {
        let mut layer = layer.clone();
        match &mut layer {
            Layer::Conv2d(conv) => {
                if let Some(keep) = channels.take() {
                    conv.weights = conv.weights.select(2, &keep);
                    conv.in_channels = keep.len();
                }
                if let Some(removed) = plan.removals.get(&conv.id).filter(|r| !r.is_empty()) {
                    let keep = complement(conv.out_channels, removed);
                    conv.weights = conv.weights.select(3, &keep);
                    conv.bias = conv.bias.select(0, &keep);
                    conv.out_channels = keep.len();
                    channels = Some(keep);
                }
            }
            Layer::BatchNorm(bn) => {
                if let Some(keep) = &channels {
                    bn.gamma = bn.gamma.select(0, keep);
                    bn.beta = bn.beta.select(0, keep);
                    bn.moving_mean = bn.moving_mean.select(0, keep);
                    bn.moving_var = bn.moving_var.select(0, keep);
                    bn.channels = keep.len();
                }
            }
            Layer::Relu { .. } | Layer::MaxPool(_) => {}
            Layer::Flatten { id } => {
                if let Some(keep) = channels.take() {
                    let input = if i == 0 { None } else { shapes.get(i - 1) };
                    let Some(&[_, h, w, c]) = input.map(Vec::as_slice) else {
                        return Err(Error::structure(id.as_str(), "flatten input is not NHWC"));
                    };
                    let mut r = Vec::with_capacity(h * w * keep.len());
                    for y in 0..h {
                        for x in 0..w {
                            r.extend(keep.iter().map(|&ch| (y * w + x) * c + ch));
                        }
                    }
                    rows = Some(r);
                }
            }
            Layer::Dense(dense) => {
                if channels.is_some() {
                    return Err(Error::structure(&dense.id, "pruned channels reach a dense layer without a flatten"));
                }
                if let Some(r) = rows.take() {
                    dense.weights = dense.weights.select(0, &r);
                    dense.in_features = r.len();
                }
            }
        }
        layers.push(layer);
    }
    if let Some(keep) = channels {
        return Err(Error::structure(
            original.layers.last().map(Layer::id).unwrap_or("<graph>"),
            format!("{} pruned channels have no consumer", keep.len()),
        ));
    }
    let mut pruned = ModelGraph {
        layers,
        input_shape: original.input_shape,
        num_classes: original.num_classes,
    };
    if let WeightPolicy::Reinit { seed } = policy {
        pruned.reinitialize(seed);
    }
    pruned.infer_shapes(1)?;
    Ok(pruned)
}

/// Runs both graphs in inference mode on `n_inputs` seeded random batches of
/// four samples each and returns the largest absolute logit difference.
///
/// Evaluation is in `f64`, so summation-order rounding from a shorter
/// reduction (a removed input channel) does not show up as a difference.
pub fn check_equivalence(a: &ModelGraph, b: &ModelGraph, n_inputs: usize, seed: u64, tol: f64) -> Result<f64> {
    if a.input_shape != b.input_shape {
        return Err(Error::invalid(format!(
            "input shapes differ: {:?} vs {:?}",
            a.input_shape, b.input_shape
        )));
    }
    let [h, w, c] = a.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0);
    let mut net_a = engine::Network::<f64>::from_graph(a)?;
    let mut net_b = engine::Network::<f64>::from_graph(b)?;
    let mut worst = 0.0f64;
    for _ in 0..n_inputs {
        let data = (0..EQUIVALENCE_BATCH * h * w * c)
            .map(|_| dist.sample(&mut rng) as f64)
            .collect();
        let x = Tensor::new(vec![EQUIVALENCE_BATCH, h, w, c], data)?;
        let ya = net_a.forward(&x, engine::Mode::Infer)?;
        let yb = net_b.forward(&x, engine::Mode::Infer)?;
        if ya.shape() != yb.shape() {
            return Err(Error::invalid(format!(
                "output shapes differ: {:?} vs {:?}",
                ya.shape(),
                yb.shape()
            )));
        }
        for (p, q) in ya.data().iter().zip(yb.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    if worst > tol {
        log::info!("graphs differ by {worst:e} (tolerance {tol:e})");
    }
    Ok(worst)
}

const EQUIVALENCE_BATCH: usize = 4;
