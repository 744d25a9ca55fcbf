use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::{DType, Tensor};

use super::network::Network;

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Layer id, tensor name and flat index of the worst entry.
    pub worst: Option<(String, String, usize)>,
    pub entries_checked: usize,
}

/// Compares every analytic gradient entry with a central difference
/// `(L(w+h) − L(w−h)) / 2h` in `f64`.
///
/// The error per entry is `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
/// Batch norm runs on batch statistics and moving statistics stay fixed.
pub fn grad_check(
    graph: &ModelGraph,
    inputs: &Tensor<f64>,
    labels: &[u32],
    step: f64,
    precision: DType,
) -> Result<GradCheckReport> {
    if precision != DType::F64 {
        return Err(Error::invalid(
            "gradient checks need f64 precision; f32 finite differences are too noisy",
        ));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut net = Network::<f64>::from_graph(graph)?;
    let (_, analytic) = net.loss_and_grads(inputs, labels)?;
    let names = net.param_names();
    debug_assert_eq!(names.len(), analytic.len());

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.grad.len() {
            let original = net.params_mut()[p][i];
            net.params_mut()[p][i] = original + step;
            let up = net.loss_only(inputs.data(), labels);
            net.params_mut()[p][i] = original - step;
            let down = net.loss_only(inputs.data(), labels);
            net.params_mut()[p][i] = original;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((names[p].0.clone(), names[p].1.to_string(), i));
            }
        }
    }
    Ok(report)
}
