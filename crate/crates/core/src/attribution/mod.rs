//! Gradient- and attention-based attribution maps.

mod export;
mod flow;

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{as_row, AttentionClassifier, AttentionStack, Classifier};
use crate::tensor::Tensor;

pub use export::{map_grid, write_csv_grid, write_pgm};
pub use flow::attention_flow;

pub const DEFAULT_IG_STEPS: usize = 32;
pub const DEFAULT_ROLLOUT_RESIDUAL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Vanilla,
    InputXGrad,
    /// Zero baseline, midpoint rule.
    IntegratedGradients { steps: usize },
    GuidedBackprop,
}

impl GradientMethod {
    pub fn integrated_gradients() -> Self {
        GradientMethod::IntegratedGradients { steps: DEFAULT_IG_STEPS }
    }
}

impl fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientMethod::Vanilla => f.write_str("vanilla"),
            GradientMethod::InputXGrad => f.write_str("input_x_grad"),
            GradientMethod::IntegratedGradients { .. } => f.write_str("integrated_gradients"),
            GradientMethod::GuidedBackprop => f.write_str("guided_backprop"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMethod {
    Raw,
    Mean,
    Rollout,
    Flow,
    AttGrad,
}

impl fmt::Display for AttentionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMethod::Raw => "raw",
            AttentionMethod::Mean => "mean",
            AttentionMethod::Rollout => "rollout",
            AttentionMethod::Flow => "flow",
            AttentionMethod::AttGrad => "attgrad",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub method: String,
    /// Native resolution: input shape for gradient maps, `T` tokens for attention maps.
    pub raw: Tensor,
    /// Same shape as the model input.
    pub resized: Tensor,
    /// `resized / ‖resized‖`, absent when the map is identically zero.
    pub unit: Option<Tensor>,
}

impl AttributionMap {
    pub fn is_degenerate(&self) -> bool {
        self.unit.is_none()
    }

    pub fn unit_or_err(&self) -> Result<&Tensor> {
        self.unit.as_ref().ok_or(Error::DegenerateAttribution)
    }
}

/// Clean-input class: argmax of the log-probabilities, lowest index on ties.
pub fn target_class<M: Classifier + ?Sized>(model: &M, x: &Tensor) -> Result<usize> {
    Ok(model.logit_bundle(x)?.argmax())
}

/// `l_i = z_i - LSE(z)` recorded in `g` for an input row `[1, n]`.
pub fn log_prob<'g, M: Classifier + ?Sized>(
    model: &M,
    g: &'g Graph,
    x: Var<'g>,
    class: usize,
    guided: bool,
) -> Result<Var<'g>> {
    let z = model.logits(g, x, guided)?;
    let d = z.shape()[1];
    if class >= d {
        return Err(Error::ClassIndex { index: class, len: d });
    }
    z.log_softmax_rows()?.gather(Rc::new(vec![class]), &[])
}

/// The attribution `e(x)` as a differentiable node shaped like `x` (`[1, n]`).
pub fn gradient_map_var<'g, M: Classifier + ?Sized>(
    method: GradientMethod,
    model: &M,
    g: &'g Graph,
    x: Var<'g>,
    class: usize,
) -> Result<Var<'g>> {
    match method {
        GradientMethod::Vanilla | GradientMethod::GuidedBackprop => {
            let guided = method == GradientMethod::GuidedBackprop;
            let l = log_prob(model, g, x, class, guided)?;
            Ok(g.grad(l, &[x])?[0])
        }
        GradientMethod::InputXGrad => {
            let l = log_prob(model, g, x, class, false)?;
            x.mul(g.grad(l, &[x])?[0])
        }
        GradientMethod::IntegratedGradients { steps } => {
            if steps == 0 {
                return Err(Error::Config("integrated gradients needs at least one step".into()));
            }
            let m = steps as f64;
            let mut acc: Option<Var<'g>> = None;
            for k in 1..=steps {
                let point = x.scale((k as f64 - 0.5) / m);
                let l = log_prob(model, g, point, class, false)?;
                let gk = g.grad(l, &[point])?[0];
                acc = Some(match acc {
                    Some(a) => a.add(gk)?,
                    None => gk,
                });
            }
            x.mul(acc.expect("steps >= 1").scale(1.0 / m))
        }
    }
}

/// Gradient attribution for class `class`, or the predicted class when `None`.
pub fn attribute_gradient<M: Classifier + ?Sized>(
    method: GradientMethod,
    model: &M,
    x: &Tensor,
    class: Option<usize>,
) -> Result<AttributionMap> {
    let class = match class {
        Some(c) => c,
        None => target_class(model, x)?,
    };
    let g = Graph::new();
    let xv = g.leaf(as_row(x)?);
    let e = gradient_map_var(method, model, &g, xv, class)?;
    let raw = e.value().reshape(x.shape())?;
    normalize_map(&raw, x.shape(), &method.to_string())
}

fn rollout(layers: &[Tensor], residual: f64) -> Result<Tensor> {
    let t = layers[0].rows();
    let mut acc = Tensor::eye(t);
    for a in layers {
        let mixed = a.scale(1.0 - residual).add(&Tensor::eye(t).scale(residual))?;
        let mut data = mixed.into_data();
        for row in data.chunks_mut(t) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        acc = Tensor::new(vec![t, t], data)?.matmul(&acc)?;
    }
    Ok(Tensor::vector(acc.row_slice(0).to_vec()))
}

/// Token-level map (length `T`) from an attention stack. `grads` holds
/// `∂l_i/∂A` with the same layout as the stack and is needed only for AttGrad.
pub fn attention_map(
    method: AttentionMethod,
    stack: &AttentionStack,
    grads: Option<&[Vec<Tensor>]>,
    residual: f64,
) -> Result<Tensor> {
    if stack.depth() == 0 {
        return Err(Error::Shape("empty attention stack".into()));
    }
    let cls_row = |a: &Tensor| Tensor::vector(a.row_slice(0).to_vec());
    if method == AttentionMethod::AttGrad {
        let grads = grads.ok_or_else(|| Error::Contract("AttGrad needs attention gradients".into()))?;
        let t = stack.tokens();
        let mut acc = Tensor::zeros(&[t, t]);
        let mut count = 0.0;
        for (heads, ghead) in stack.layers.iter().zip(grads) {
            for (a, ga) in heads.iter().zip(ghead) {
                acc = acc.add(&a.mul(ga)?.map(|v| v.max(0.0)))?;
                count += 1.0;
            }
        }
        return Ok(cls_row(&acc.scale(1.0 / count)));
    }
    let normalized = stack.softmax_normalized();
    let layers: Vec<Tensor> = (0..normalized.depth()).map(|l| normalized.head_mean(l)).collect();
    match method {
        AttentionMethod::Raw => Ok(cls_row(layers.last().expect("nonempty"))),
        AttentionMethod::Mean => {
            let mut acc = layers[0].clone();
            for a in &layers[1..] {
                acc = acc.add(a)?;
            }
            Ok(cls_row(&acc.scale(1.0 / layers.len() as f64)))
        }
        AttentionMethod::Rollout => rollout(&layers, residual),
        AttentionMethod::Flow => Ok(attention_flow(&layers)),
        AttentionMethod::AttGrad => unreachable!(),
    }
}

/// Attention attribution of a ViT at `x` for `class` (predicted class when `None`).
pub fn attribute_attention<M: AttentionClassifier + ?Sized>(
    method: AttentionMethod,
    model: &M,
    x: &Tensor,
    class: Option<usize>,
) -> Result<AttributionMap> {
    let class = match class {
        Some(c) => c,
        None => target_class(model, x)?,
    };
    let g = Graph::new();
    let xv = g.leaf(as_row(x)?);
    let (z, att) = model.logits_and_attention(&g, xv)?;
    let d = z.shape()[1];
    if class >= d {
        return Err(Error::ClassIndex { index: class, len: d });
    }
    let stack = AttentionStack {
        layers: att.iter().map(|h| h.iter().map(|a| (*a.value()).clone()).collect()).collect(),
        normalized: model.attention_kind().is_normalized(),
    };
    let grads = if method == AttentionMethod::AttGrad {
        let l = z.log_softmax_rows()?.gather(Rc::new(vec![class]), &[])?;
        let flat: Vec<Var<'_>> = att.iter().flatten().copied().collect();
        let gs = g.grad(l, &flat)?;
        let mut it = gs.into_iter();
        Some(
            att.iter()
                .map(|heads| heads.iter().map(|_| (*it.next().expect("one per head").value()).clone()).collect())
                .collect::<Vec<Vec<Tensor>>>(),
        )
    } else {
        None
    };
    let raw = attention_map(method, &stack, grads.as_deref(), DEFAULT_ROLLOUT_RESIDUAL)?;
    normalize_map(&raw, x.shape(), &method.to_string())
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Brings `raw` to the input shape and L2-normalizes it. Maps with as many
/// entries as the input are only reshaped; token maps (`g² + 1` entries with a
/// leading CLS, or `g²`) are upsampled by nearest neighbour over every channel.
pub fn normalize_map(raw: &Tensor, input_dims: &[usize], method: &str) -> Result<AttributionMap> {
    let n: usize = input_dims.iter().product();
    let resized = if raw.len() == n {
        raw.reshape(input_dims)?
    } else {
        let tokens = match exact_sqrt(raw.len().saturating_sub(1)) {
            Some(g) if g > 0 => &raw.data()[1..],
            _ => raw.data(),
        };
        let grid = exact_sqrt(tokens.len()).filter(|&g| g > 0);
        let (c, side) = match input_dims {
            [c, h, w] if h == w => (*c, *h),
            _ => return Err(Error::Shape(format!("cannot place a {}-token map on input {input_dims:?}", raw.len()))),
        };
        let grid = grid
            .filter(|g| side % g == 0)
            .ok_or_else(|| Error::Shape(format!("{} tokens do not tile a {side}x{side} image", tokens.len())))?;
        let patch = side / grid;
        let mut data = Vec::with_capacity(n);
        for _ in 0..c {
            for r in 0..side {
                for col in 0..side {
                    data.push(tokens[(r / patch) * grid + col / patch]);
                }
            }
        }
        Tensor::new(input_dims.to_vec(), data)?
    };
    let norm = resized.norm();
    let unit = (norm > 0.0 && norm.is_finite()).then(|| resized.scale(1.0 / norm));
    Ok(AttributionMap { method: method.to_string(), raw: raw.clone(), resized, unit })
}
