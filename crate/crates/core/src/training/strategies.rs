use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{cross_entropy_var, LabeledData};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{Activation, Model, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "beta")]
pub enum SwapTarget {
    Softplus(f64),
    Gelu,
}

impl SwapTarget {
    pub fn activation(self) -> Activation {
        match self {
            SwapTarget::Softplus(beta) => Activation::Softplus(beta),
            SwapTarget::Gelu => Activation::Gelu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    Ante,
    Post,
}

/// Replaces ReLU by a smooth activation; weights are copied untouched.
pub fn activation_swap(model: &Model, target: SwapTarget, mode: SwapMode) -> Model {
    if model.spec.activation != Activation::Relu {
        log::warn!("no ReLU sites to swap ({:?}), model left unchanged", model.spec.activation);
        return model.clone();
    }
    log::debug!("swapping ReLU for {target:?} ({mode:?})");
    model.with_activation(target.activation())
}

/// `θ ← θ - lr · lr_mult · g` for every parameter.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.value = p.value.axpy(-lr * p.lr_mult, g)?;
    }
    Ok(())
}

/// Sharpness-aware step: `grad0` is the batch gradient at `θ`, `grad_at`
/// recomputes it at the ascended point `θ + ρ g/‖g‖`, and the descent is
/// applied at `θ`. With `ρ = 0` or a zero gradient this is the plain SGD step.
pub fn sam_step(
    params: &mut ParamSet,
    grad0: &[Tensor],
    rho: f64,
    lr: f64,
    mut grad_at: impl FnMut(&ParamSet) -> Result<Vec<Tensor>>,
) -> Result<()> {
    let norm = grad0.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if rho == 0.0 || norm == 0.0 {
        return sgd_step(params, grad0, lr);
    }
    let mut shifted = params.clone();
    for (p, g) in shifted.iter_mut().zip(grad0) {
        p.value = p.value.axpy(rho / norm, g)?;
    }
    let g1 = grad_at(&shifted)?;
    sgd_step(params, &g1, lr)
}

/// `λ · mean_b ‖∇_x y_bᵀ l_b‖²` as a node differentiable in the parameters.
pub fn ecr_penalty_var<'g>(g: &'g Graph, logits: Var<'g>, x: Var<'g>, labels: &[usize], lambda: f64) -> Result<Var<'g>> {
    let d = logits.shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= d) {
        return Err(Error::ClassIndex { index: y, len: d });
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(b, &y)| b * d + y).collect();
    let picked = logits.log_softmax_rows()?.gather(Rc::new(idx), &[labels.len()])?.sum();
    let gx = g.grad(picked, &[x])?[0];
    Ok(gx.norm_sq().scale(lambda / labels.len() as f64))
}

pub fn ecr_penalty(model: &Model, batch: &LabeledData, lambda: f64) -> Result<f64> {
    let g = Graph::new();
    let params = model.bind(&g);
    let x = g.leaf(batch.inputs.clone());
    let z = model.forward_with(&params, x, false)?.logits;
    Ok(ecr_penalty_var(&g, z, x, &batch.labels, lambda)?.item())
}

/// Per-sample L2 PGD ascent on the cross-entropy. One step moves the full
/// radius along the normalized gradient; more steps use `2.5 ε / steps`.
pub fn atr_perturb(model: &Model, batch: &LabeledData, eps: f64, steps: usize) -> Result<LabeledData> {
    if eps == 0.0 || steps == 0 {
        return Ok(batch.clone());
    }
    let n = batch.dim();
    let alpha = if steps == 1 { eps } else { 2.5 * eps / steps as f64 };
    let mut delta = Tensor::zeros(batch.inputs.shape());
    for _ in 0..steps {
        let g = Graph::new();
        let params = model.bind(&g);
        let x = g.leaf(batch.inputs.add(&delta)?);
        let z = model.forward_with(&params, x, false)?.logits;
        let loss = cross_entropy_var(z, &batch.labels)?;
        let grad = (*g.grad(loss, &[x])?[0].value()).clone();
        let dd = delta.data_mut();
        for b in 0..batch.len() {
            let gr = grad.row_slice(b);
            let gn = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = &mut dd[b * n..(b + 1) * n];
            if gn > 0.0 {
                row.iter_mut().zip(gr).for_each(|(d, gv)| *d += alpha * gv / gn);
            }
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn > eps {
                row.iter_mut().for_each(|d| *d *= eps / rn);
            }
        }
    }
    LabeledData::new(batch.inputs.add(&delta)?, batch.labels.clone())
}
