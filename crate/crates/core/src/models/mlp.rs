use rand::Rng;

use super::{Forward, ModelSpec, ParamGroup, ParamSet};
use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Tensor;

pub(super) fn layer_widths(spec: &ModelSpec, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![spec.input_len()];
    w.extend_from_slice(hidden);
    w.push(spec.num_classes);
    w
}

pub(super) fn init<R: Rng>(spec: &ModelSpec, hidden: &[usize], rng: &mut R) -> ParamSet {
    let widths = layer_widths(spec, hidden);
    let last = widths.len() - 2;
    let mut ps = ParamSet::new();
    for (l, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let group = if l == last { ParamGroup::Classifier } else { ParamGroup::Backbone };
        let std = (2.0 / fan_in as f64).sqrt();
        ps.push(format!("fc{}.weight", l + 1), Tensor::randn(&[fan_in, fan_out], std, rng), group);
        ps.push(format!("fc{}.bias", l + 1), Tensor::zeros(&[fan_out]), group);
    }
    ps
}

/// `h_0 = x`, `h_l = act(h_{l-1} W_l + b_l)` for hidden layers, linear head.
pub(super) fn forward<'g>(
    spec: &ModelSpec,
    params: &[Var<'g>],
    x: Var<'g>,
    guided: bool,
) -> Result<Forward<'g>> {
    let layers = params.len() / 2;
    let mut hidden = vec![x];
    let mut h = x;
    for l in 0..layers {
        let pre = h.matmul(params[2 * l])?.add_row_vector(params[2 * l + 1])?;
        if l + 1 == layers {
            return Ok(Forward { logits: pre, hidden, attention: vec![] });
        }
        h = spec.activation.apply(pre, guided);
        hidden.push(h);
    }
    unreachable!("an MLP always has an output layer")
}
