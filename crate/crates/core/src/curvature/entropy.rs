use serde::{Deserialize, Serialize};

use super::spectral::spectral_norm;
use crate::error::{Error, Result};
use crate::models::{Architecture, AttentionStack, Model};
use crate::tensor::Tensor;

/// Shannon entropy (natural log) of a probability row, with `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub tokens: usize,
    /// Mean row entropy per layer, averaged over heads.
    pub entropy: Vec<f64>,
    /// `ln T - entropy` per layer.
    pub distance_to_uniform: Vec<f64>,
    /// Head-averaged `‖W_K W_Qᵀ‖₂` per layer; empty when no weights were given.
    pub sigma: Vec<f64>,
}

/// Entropy statistics of a stack; unnormalized (kernelized) stacks are
/// row-softmaxed first.
pub fn attention_entropy(stack: &AttentionStack) -> Result<EntropyStats> {
    let stack = stack.softmax_normalized();
    let t = stack.tokens();
    let mut entropy = Vec::with_capacity(stack.depth());
    for heads in &stack.layers {
        let mut acc = 0.0;
        let mut rows = 0.0;
        for a in heads {
            if a.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Contract("normalized attention has negative or non-finite entries".into()));
            }
            for r in 0..a.rows() {
                acc += row_entropy(a.row_slice(r));
                rows += 1.0;
            }
        }
        entropy.push(acc / rows);
    }
    let ln_t = (t as f64).ln();
    let distance_to_uniform = entropy.iter().map(|e| ln_t - e).collect();
    Ok(EntropyStats { tokens: t, entropy, distance_to_uniform, sigma: vec![] })
}

/// Head-averaged spectral norm of `W_K W_Qᵀ` for every ViT layer.
pub fn attention_sigma(model: &Model) -> Result<Vec<f64>> {
    let Architecture::Vit(v) = &model.spec.arch else {
        return Err(Error::Contract("attention weights requested from an MLP".into()));
    };
    (0..v.depth)
        .map(|l| {
            let mut acc = 0.0;
            for h in 0..v.heads {
                let wq = &model.params.get(&format!("blocks.{l}.attn.q.{h}")).expect("query weight").value;
                let wk = &model.params.get(&format!("blocks.{l}.attn.k.{h}")).expect("key weight").value;
                acc += spectral_norm(&wk.matmul(&wq.transpose())?)?;
            }
            Ok(acc / v.heads as f64)
        })
        .collect()
}

/// Entropy of the attention of `model` at `x`, plus the per-layer σ.
pub fn entropy_stats(model: &Model, x: &Tensor) -> Result<EntropyStats> {
    let (_, _, stack) = model.evaluate(x)?;
    let stack = stack.ok_or_else(|| Error::Contract("entropy statistics need a ViT".into()))?;
    let mut stats = attention_entropy(&stack)?;
    stats.sigma = attention_sigma(model)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBoundResult {
    pub tokens: usize,
    pub ent_min: Vec<f64>,
    /// Largest L2 distance between two rows of entropy at least `ent_min`.
    pub max_deviation: Vec<f64>,
}

/// Entropies within this distance of a threshold count as meeting it.
const ENTROPY_TOL: f64 = 1e-12;

fn compositions(parts: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.iter().map(|&k| k as f64 / prefix.iter().sum::<usize>() as f64).collect());
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(parts - 1, total - k, prefix, out);
        prefix.pop();
    }
}

/// Brute-force `M(S(e))` over the simplex lattice of resolution `step` (plus
/// its barycentre) for each threshold `e` of the grid.
pub fn entropy_bound_oracle(tokens: usize, ent_min_grid: &[f64], step: f64) -> Result<EntropyBoundResult> {
    if !(2..=4).contains(&tokens) {
        return Err(Error::Config(format!("entropy oracle supports 2 to 4 tokens, got {tokens}")));
    }
    if !(step > 0.0 && step <= 0.02) {
        return Err(Error::Config(format!("entropy oracle needs 0 < step <= 0.02, got {step}")));
    }
    let ln_t = (tokens as f64).ln();
    if let Some(e) = ent_min_grid.iter().find(|&&e| e > ln_t + ENTROPY_TOL || e.is_nan()) {
        return Err(Error::Contract(format!("no attention row has entropy >= {e} with {tokens} tokens")));
    }
    let n = (1.0 / step).round() as usize;
    let mut points = Vec::new();
    compositions(tokens, n, &mut Vec::with_capacity(tokens), &mut points);
    if n % tokens != 0 {
        points.push(vec![1.0 / tokens as f64; tokens]);
    }
    let mut scored: Vec<(f64, Vec<f64>)> = points.into_iter().map(|p| (row_entropy(&p), p)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    // prefix_max[k]: diameter of the k+1 highest-entropy points
    let mut prefix_max = Vec::with_capacity(scored.len());
    let mut diameter: f64 = 0.0;
    for k in 0..scored.len() {
        for j in 0..k {
            let d2: f64 = scored[k].1.iter().zip(&scored[j].1).map(|(a, b)| (a - b) * (a - b)).sum();
            diameter = diameter.max(d2);
        }
        prefix_max.push(diameter.sqrt());
    }
    let max_deviation = ent_min_grid
        .iter()
        .map(|&e| {
            let count = scored.partition_point(|(h, _)| *h >= e - ENTROPY_TOL);
            prefix_max[count - 1]
        })
        .collect();
    Ok(EntropyBoundResult { tokens, ent_min: ent_min_grid.to_vec(), max_deviation })
}

/// `count` evenly spaced thresholds from 0 to `ln T` inclusive.
pub fn entropy_grid(tokens: usize, count: usize) -> Vec<f64> {
    let ln_t = (tokens as f64).ln();
    if count == 1 {
        return vec![ln_t];
    }
    (0..count).map(|k| if k + 1 == count { ln_t } else { ln_t * k as f64 / (count - 1) as f64 }).collect()
}
