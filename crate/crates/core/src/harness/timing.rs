use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{Hyperparams, Trainer};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;

#[derive(Clone, Debug, Serialize)]
pub struct StepTiming {
    pub median_ms: f64,
    pub all_ms: Vec<f64>,
    /// Set when no warm-up steps ran, so the first sample includes cold
    /// caches and allocation.
    pub unwarmed: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Wall-clock time of full `f32` training steps (forward, backward, momentum
/// update) on one fixed random batch.
pub fn measure_step_time(graph: &ModelGraph, batch: usize, warmup: usize, reps: usize) -> Result<StepTiming> {
    if reps < 5 {
        return Err(Error::invalid(format!("need at least 5 timed repetitions, got {reps}")));
    }
    if batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let hp = Hyperparams {
        batch_size: batch,
        ..Default::default()
    };
    let mut trainer = Trainer::<f32>::new(graph, &hp)?;
    let [h, w, c] = graph.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5717);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0);
    let x: Vec<f32> = (0..batch * h * w * c).map(|_| dist.sample(&mut rng)).collect();
    let labels: Vec<u32> = (0..batch).map(|i| (i % graph.num_classes) as u32).collect();
    for _ in 0..warmup {
        trainer.step(&x, &labels)?;
    }
    let mut all_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        trainer.step(&x, &labels)?;
        all_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    if warmup == 0 {
        log::warn!("step timing ran without warm-up; the first sample is cold");
    }
    Ok(StepTiming {
        median_ms: median(&all_ms),
        all_ms,
        unwarmed: warmup == 0,
    })
}
