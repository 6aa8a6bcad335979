use super::spectral::{jacobian_norm, spectral_norm};
use crate::autodiff::graph_fn;
use crate::error::{Error, Result};
use crate::models::{as_row, Architecture, Model};
use crate::tensor::Tensor;

/// Per-layer terms `‖h_{l-1}‖² / (‖θ_l‖₂² ‖∇_x h_{l-1}‖₂²)` of an MLP at `x`;
/// `None` marks a layer whose denominator vanishes.
pub fn snr_terms(model: &Model, x: &Tensor) -> Result<Vec<Option<f64>>> {
    let Architecture::Mlp { hidden } = &model.spec.arch else {
        return Err(Error::Contract("the layerwise SNR is defined for MLPs".into()));
    };
    let layers = hidden.len() + 1;
    let row = as_row(x)?;
    let (_, trace, _) = model.evaluate(x)?;
    let mut terms = Vec::with_capacity(layers);
    for l in 1..=layers {
        let h = &trace[l - 1];
        let w = &model.params.get(&format!("fc{l}.weight")).expect("mlp layer").value;
        let theta = spectral_norm(w)?;
        let jac = jacobian_norm(
            graph_fn(|g, xv| {
                let params = model.bind(g);
                Ok(model.forward_with(&params, xv, false)?.hidden[l - 1])
            }),
            &row,
        )?;
        let denom = theta * theta * jac * jac;
        if denom > 0.0 && denom.is_finite() {
            terms.push(Some(h.norm().powi(2) / denom));
        } else {
            log::warn!("layer {l} has a vanishing SNR denominator; term excluded");
            terms.push(None);
        }
    }
    Ok(terms)
}

/// Aggregate layerwise scaled signal-to-noise ratio `c(x)`.
pub fn snr_c(model: &Model, x: &Tensor) -> Result<f64> {
    Ok(snr_terms(model, x)?.into_iter().flatten().sum())
}
