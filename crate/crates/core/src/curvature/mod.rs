//! Curvature and entropy probes.

mod entropy;
mod gauss_newton;
mod snr;
mod spectral;
mod toy;

use serde::{Deserialize, Serialize};

use crate::attribution::target_class;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub use entropy::{
    attention_entropy, attention_sigma, entropy_bound_oracle, entropy_grid, entropy_stats, row_entropy,
    EntropyBoundResult, EntropyStats,
};
pub use gauss_newton::{
    gn_decomposition_input, gn_decomposition_params, param_gn_trace, GnDecomposition, OutputCurvature, ParamFn,
    TraceMethod, DENSE_LIMIT,
};
pub use snr::{snr_c, snr_terms};
pub use spectral::{
    input_hessian_lambda_max, jacobian_norm, lanczos_extreme, operator_norm, power_iteration, spectral_norm, PowerResult,
    POWER_MAX_ITERS, POWER_TOL,
};
pub use toy::{GdOutcome, LinearChain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub lambda_max: f64,
    pub lambda_converged: bool,
    pub gn_trace_param: f64,
    /// Absent for models without a layerwise trace.
    pub snr_c: Option<f64>,
    /// `‖H - (G + F)‖∞` in input space, when the dense check ran.
    pub hessian_fro_err: Option<f64>,
}

/// All curvature probes of `model` at `x`; `batch` feeds the parameter trace.
pub fn curvature_report(model: &Model, x: &Tensor, batch: &Tensor, dense_check: bool) -> Result<CurvatureReport> {
    let class = target_class(model, x)?;
    let lam = input_hessian_lambda_max(model, x, class)?;
    let trace = param_gn_trace(model, batch, OutputCurvature::CrossEntropy, TraceMethod::Exact)?;
    let snr = if model.is_vit() { None } else { Some(snr_c(model, x)?) };
    let err = if dense_check && x.len() <= DENSE_LIMIT {
        Some(gn_decomposition_input(model, x, class)?.max_err)
    } else {
        None
    };
    Ok(CurvatureReport {
        lambda_max: lam.value,
        lambda_converged: lam.converged,
        gn_trace_param: trace,
        snr_c: snr,
        hessian_fro_err: err,
    })
}

/// Principal curvatures `κ_i = λ_i / √(1 + g²)` of the graph of the logit.
pub fn principal_curvatures(lambdas: &[f64], grad_norm: f64) -> Result<Vec<f64>> {
    if !(grad_norm >= 0.0) {
        return Err(Error::Contract(format!("gradient norm must be nonnegative, got {grad_norm}")));
    }
    let s = (1.0 + grad_norm * grad_norm).sqrt();
    Ok(lambdas.iter().map(|l| l / s).collect())
}

#[cfg(test)]
mod tests;
