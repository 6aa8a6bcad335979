//! Single-head attention score computations, softmax and kernelized.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature map applied to queries and keys in kernelized attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phi", content = "beta")]
pub enum KernelFeature {
    Gelu,
    Relu,
    EluPlusOne,
    Softplus(f64),
    /// Rows of `Q` and `K` are L2-normalized, no elementwise map.
    CosineSim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "feature")]
pub enum AttentionKind {
    Softmax,
    Kernelized(KernelFeature),
}

impl AttentionKind {
    pub fn is_normalized(&self) -> bool {
        matches!(self, AttentionKind::Softmax)
    }
}

fn check_shapes(q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
    if q.len() != 2 || q != k || v.len() != 2 || v[0] != q[0] {
        return Err(Error::Shape(format!("attention Q{q:?} K{k:?} V{v:?}")));
    }
    Ok(())
}

/// `A = softmax_rows(Q K^T / sqrt(h))`, `out = A V`.
pub fn softmax_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    check_shapes(&q.shape(), &k.shape(), &v.shape())?;
    let h = q.shape()[1] as f64;
    let scores = q.matmul(k.t())?.scale(1.0 / h.sqrt());
    let a = scores.softmax_rows()?;
    Ok((a.matmul(v)?, a))
}

fn feature<'g>(x: Var<'g>, phi: KernelFeature) -> Result<Var<'g>> {
    Ok(match phi {
        KernelFeature::Gelu => x.gelu(),
        KernelFeature::Relu => x.relu(),
        KernelFeature::EluPlusOne => x.elu().add_scalar(1.0),
        KernelFeature::Softplus(beta) => x.softplus(beta),
        KernelFeature::CosineSim => {
            let cols = x.shape()[1];
            if x.value().data().chunks(cols).any(|row| row.iter().all(|&v| v == 0.0)) {
                return Err(Error::Contract("cosine-similarity attention on a zero row".into()));
            }
            x.l2_normalize_rows()?
        }
    })
}

/// `A = phi(Q) phi(K)^T` without normalization, `out = A V`.
pub fn kernelized_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    phi: KernelFeature,
) -> Result<(Var<'g>, Var<'g>)> {
    check_shapes(&q.shape(), &k.shape(), &v.shape())?;
    let a = feature(q, phi)?.matmul(feature(k, phi)?.t())?;
    Ok((a.matmul(v)?, a))
}

pub fn attention<'g>(
    kind: AttentionKind,
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    match kind {
        AttentionKind::Softmax => softmax_attention(q, k, v),
        AttentionKind::Kernelized(phi) => kernelized_attention(q, k, v, phi),
    }
}

/// Value-level convenience wrapper around [`attention`].
pub fn attention_values(kind: AttentionKind, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let (out, a) = attention(kind, g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()))?;
    let (out, a) = ((*out.value()).clone(), (*a.value()).clone());
    Ok((out, a))
}
