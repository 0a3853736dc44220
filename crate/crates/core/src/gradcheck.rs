//! Finite-difference verification of the analytic BPTT gradients.
//!
//! The loss is re-evaluated through [`forward_with_masks`] so dropout masks
//! stay frozen at the values drawn by the traced pass.

use crate::error::Result;
use crate::lstm::{backward, forward, forward_with_masks, window_loss, ModelConfig, ModelParams};
use crate::tensor::{numeric_gradient, Matrix, Rng};

/// Denominator floor so entries whose true gradient is ~0 are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every parameter entry.
    pub max_relative_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst_tensor: String,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward` against central differences with step `eps`.
pub fn check_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    rng: &mut Rng,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, trace) = forward(params, config, window, true, rng)?;
    let trace = trace.expect("training forward keeps its trace");
    let masks = trace.masks();
    let analytic = backward(params, config, &trace, window)?;

    let analytic_tensors = analytic.named_tensors();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_tensor: String::new(), entries_checked: 0 };
    for (index, (name, grad)) in analytic_tensors.iter().enumerate() {
        let base = params.tensors()[index].clone();
        let numeric = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                *p.tensors_mut()[index] = probe.clone();
                let (recon, _) = forward_with_masks(&p, config, window, &masks).expect("shapes fixed");
                window_loss(window, &recon).expect("shapes fixed")
            },
            &base,
            eps,
        )?;
        for (a, n) in grad.as_slice().iter().zip(numeric.as_slice()) {
            let err = relative_error(*a, *n);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
            }
        }
    }
    Ok(report)
}
