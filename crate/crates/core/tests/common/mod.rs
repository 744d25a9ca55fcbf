#![allow(dead_code)]

use chanprune::graph::{ChainBuilder, Layer, ModelGraph};
use chanprune::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Conv, batch norm, ReLU, max pool, flatten, dense with ReLU and a final
/// dense layer, with every non-weight parameter randomized.
pub fn all_kinds(seed: u64) -> ModelGraph {
    let mut g = ChainBuilder::new(seed)
        .conv(2, 3, 3)
        .batch_norm(3)
        .relu()
        .max_pool()
        .conv(3, 4, 3)
        .batch_norm(4)
        .relu()
        .flatten()
        .dense(2 * 2 * 4, 5, true)
        .dense(5, 3, false)
        .build([4, 4, 2], 3);
    randomize_affine(&mut g, seed);
    g
}

/// Adds noise to biases, γ and β, and draws moving statistics so that
/// inference mode does something non-trivial.
pub fn randomize_affine(g: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let d = Uniform::new_inclusive(-0.5f32, 0.5);
    for layer in &mut g.layers {
        for (name, t) in layer.weights_mut() {
            match name {
                "weights" => {}
                "moving_var" => t.data_mut().iter_mut().for_each(|v| *v = 0.5 + d.sample(&mut rng).abs()),
                _ => t.data_mut().iter_mut().for_each(|v| *v += d.sample(&mut rng)),
            }
        }
    }
}

pub fn uniform_batch<T: chanprune::tensor::Scalar>(seed: u64, shape: [usize; 3], n: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Uniform::new_inclusive(-1.0f64, 1.0);
    let len = n * shape.iter().product::<usize>();
    Tensor::new(
        vec![n, shape[0], shape[1], shape[2]],
        (0..len).map(|_| T::from_f64(d.sample(&mut rng))).collect(),
    )
    .unwrap()
}

pub fn cyclic_labels(n: usize, classes: usize) -> Vec<u32> {
    (0..n).map(|i| (i % classes) as u32).collect()
}

pub fn without_batch_norm(g: &ModelGraph) -> ModelGraph {
    ModelGraph {
        layers: g
            .layers
            .iter()
            .filter(|l| !matches!(l, Layer::BatchNorm(_)))
            .cloned()
            .collect(),
        ..g.clone()
    }
}
