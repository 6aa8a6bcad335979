use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention, AttentionKind};
use super::{Forward, ModelSpec, ParamGroup, ParamSet};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitSpec {
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    /// Learned additive position embeddings.
    pub pos_embed: bool,
}

impl VitSpec {
    pub fn tiny(attention: AttentionKind) -> Self {
        VitSpec { patch: 4, embed_dim: 12, depth: 2, heads: 3, mlp_ratio: 2, attention, pos_embed: true }
    }

    pub(super) fn validate(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 3 || dims[1] != dims[2] {
            return Err(Error::Config(format!("vit expects [channels, side, side], got {dims:?}")));
        }
        if self.patch == 0 || dims[1] % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch size {}",
                dims[1], self.patch
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 || self.depth == 0 {
            return Err(Error::Config("embed_dim must split evenly across heads".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn num_patches(&self, side: usize) -> usize {
        (side / self.patch).pow(2)
    }

    /// Token count including the CLS token.
    pub fn tokens(&self, side: usize) -> usize {
        self.num_patches(side) + 1
    }
}

/// Flat indices (CHW layout) of each patch, patches in row-major grid order
/// and each patch flattened as `(channel, row, col)`.
pub(super) fn patch_indices(channels: usize, side: usize, patch: usize) -> Vec<usize> {
    let grid = side / patch;
    let mut idx = Vec::with_capacity(channels * side * side);
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..channels {
                for i in 0..patch {
                    for j in 0..patch {
                        idx.push(c * side * side + (pr * patch + i) * side + pc * patch + j);
                    }
                }
            }
        }
    }
    idx
}

pub(super) fn init<R: Rng>(spec: &ModelSpec, v: &VitSpec, rng: &mut R) -> ParamSet {
    let (c, side) = (spec.input_dims[0], spec.input_dims[1]);
    let pd = c * v.patch * v.patch;
    let d = v.embed_dim;
    let dh = v.head_dim();
    let dm = d * v.mlp_ratio;
    let t = v.tokens(side);
    let bb = ParamGroup::Backbone;
    let mut ps = ParamSet::new();
    ps.push("patch.weight", Tensor::randn(&[pd, d], (1.0 / pd as f64).sqrt(), rng), bb);
    ps.push("patch.bias", Tensor::zeros(&[d]), bb);
    ps.push("cls", Tensor::randn(&[1, d], 0.5, rng), bb);
    if v.pos_embed {
        ps.push("pos", Tensor::randn(&[t, d], 0.1, rng), bb);
    }
    let proj_std = (1.0 / d as f64).sqrt();
    for l in 0..v.depth {
        ps.push(format!("blocks.{l}.ln1.gamma"), Tensor::ones(&[d]), bb);
        ps.push(format!("blocks.{l}.ln1.beta"), Tensor::zeros(&[d]), bb);
        for h in 0..v.heads {
            for name in ["q", "k", "v"] {
                ps.push(format!("blocks.{l}.attn.{name}.{h}"), Tensor::randn(&[d, dh], proj_std, rng), bb);
            }
            let out_std = (1.0 / (dh * v.heads) as f64).sqrt();
            ps.push(format!("blocks.{l}.attn.out.{h}"), Tensor::randn(&[dh, d], out_std, rng), bb);
        }
        ps.push(format!("blocks.{l}.attn.out_bias"), Tensor::zeros(&[d]), bb);
        ps.push(format!("blocks.{l}.ln2.gamma"), Tensor::ones(&[d]), bb);
        ps.push(format!("blocks.{l}.ln2.beta"), Tensor::zeros(&[d]), bb);
        ps.push(format!("blocks.{l}.mlp.fc1.weight"), Tensor::randn(&[d, dm], (2.0 / d as f64).sqrt(), rng), bb);
        ps.push(format!("blocks.{l}.mlp.fc1.bias"), Tensor::zeros(&[dm]), bb);
        ps.push(format!("blocks.{l}.mlp.fc2.weight"), Tensor::randn(&[dm, d], (1.0 / dm as f64).sqrt(), rng), bb);
        ps.push(format!("blocks.{l}.mlp.fc2.bias"), Tensor::zeros(&[d]), bb);
    }
    ps.push("norm.gamma", Tensor::ones(&[d]), bb);
    ps.push("norm.beta", Tensor::zeros(&[d]), bb);
    let cls = ParamGroup::Classifier;
    ps.push("head.weight", Tensor::randn(&[d, spec.num_classes], proj_std, rng), cls);
    ps.push("head.bias", Tensor::zeros(&[spec.num_classes]), cls);
    ps
}

fn layer_norm<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    let rows = x.shape()[0];
    x.standardize_rows(LN_EPS)?
        .mul(gamma.broadcast_rows(rows))?
        .add(beta.broadcast_rows(rows))
}

struct Cursor<'a, 'g> {
    params: &'a [Var<'g>],
    at: usize,
}

impl<'g> Cursor<'_, 'g> {
    fn next(&mut self) -> Var<'g> {
        self.at += 1;
        self.params[self.at - 1]
    }
}

/// Pre-norm transformer on each row of `x`; logits come from the CLS token.
pub(super) fn forward<'g>(
    spec: &ModelSpec,
    v: &VitSpec,
    params: &[Var<'g>],
    x: Var<'g>,
    guided: bool,
) -> Result<Forward<'g>> {
    let (c, side) = (spec.input_dims[0], spec.input_dims[1]);
    let n = spec.input_len();
    let batch = x.shape()[0];
    let d = v.embed_dim;
    let t = v.tokens(side);
    let np = v.num_patches(side);
    let pd = c * v.patch * v.patch;
    let patches = patch_indices(c, side, v.patch);
    let cls_slots = Rc::new((0..d).collect::<Vec<_>>());
    let patch_slots = Rc::new((d..t * d).collect::<Vec<_>>());
    let d_classes = spec.num_classes;

    let mut logits: Option<Var<'g>> = None;
    let mut attention_all = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut cur = Cursor { params, at: 0 };
        let idx = Rc::new(patches.iter().map(|i| i + b * n).collect::<Vec<_>>());
        let emb = x
            .gather(idx, &[np, pd])?
            .matmul(cur.next())?
            .add_row_vector(cur.next())?;
        let cls = cur.next();
        let mut tokens = cls
            .scatter_add(cls_slots.clone(), &[t, d])?
            .add(emb.scatter_add(patch_slots.clone(), &[t, d])?)?;
        if v.pos_embed {
            tokens = tokens.add(cur.next())?;
        }
        let mut layers = Vec::with_capacity(v.depth);
        for _ in 0..v.depth {
            let (g1, b1) = (cur.next(), cur.next());
            let h = layer_norm(tokens, g1, b1)?;
            let mut heads = Vec::with_capacity(v.heads);
            let mut mixed: Option<Var<'g>> = None;
            for _ in 0..v.heads {
                let q = h.matmul(cur.next())?;
                let k = h.matmul(cur.next())?;
                let val = h.matmul(cur.next())?;
                let (out, a) = attention(v.attention, q, k, val)?;
                let proj = out.matmul(cur.next())?;
                mixed = Some(match mixed {
                    Some(m) => m.add(proj)?,
                    None => proj,
                });
                heads.push(a);
            }
            let attn_out = mixed.expect("at least one head").add_row_vector(cur.next())?;
            tokens = tokens.add(attn_out)?;
            let (g2, b2) = (cur.next(), cur.next());
            let h2 = layer_norm(tokens, g2, b2)?;
            let (w1, c1, w2, c2) = (cur.next(), cur.next(), cur.next(), cur.next());
            let hidden = spec.activation.apply(h2.matmul(w1)?.add_row_vector(c1)?, guided);
            tokens = tokens.add(hidden.matmul(w2)?.add_row_vector(c2)?)?;
            layers.push(heads);
        }
        let (gn, bn) = (cur.next(), cur.next());
        let normed = layer_norm(tokens, gn, bn)?;
        let cls_out = normed.gather(cls_slots.clone(), &[1, d])?;
        let (wh, bh) = (cur.next(), cur.next());
        let z = cls_out.matmul(wh)?.add_row_vector(bh)?;
        debug_assert_eq!(cur.at, params.len());
        let z = if batch == 1 {
            z
        } else {
            let slots = Rc::new((b * d_classes..(b + 1) * d_classes).collect::<Vec<_>>());
            z.scatter_add(slots, &[batch, d_classes])?
        };
        logits = Some(match logits {
            Some(acc) => acc.add(z)?,
            None => z,
        });
        attention_all.push(layers);
    }
    let logits = logits.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Ok(Forward { logits, hidden: vec![], attention: attention_all })
}
