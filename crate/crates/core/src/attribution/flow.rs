//! Max-flow through the layered attention graph.

use std::collections::VecDeque;

use crate::tensor::Tensor;

/// Edmonds–Karp on a dense capacity matrix.
pub(crate) fn max_flow(cap: &[Vec<f64>], source: usize, sink: usize) -> f64 {
    let n = cap.len();
    let mut residual = cap.to_vec();
    let mut total = 0.0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[source] = source;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            if u == sink {
                break;
            }
            for v in 0..n {
                if prev[v] == usize::MAX && residual[u][v] > 0.0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if source == sink || prev[sink] == usize::MAX {
            return total;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let u = prev[v];
            bottleneck = bottleneck.min(residual[u][v]);
            v = u;
        }
        let mut v = sink;
        while v != source {
            let u = prev[v];
            residual[u][v] -= bottleneck;
            residual[v][u] += bottleneck;
            v = u;
        }
        total += bottleneck;
    }
}

/// Capacity matrix of the layered graph: node `(l, j)` has id `l * T + j`,
/// layer 0 holds the input tokens and layer `L` the output tokens. The edge
/// `(l, j) -> (l - 1, k)` carries `layers[l - 1][j, k]`.
pub(crate) fn layered_capacities(layers: &[Tensor]) -> Vec<Vec<f64>> {
    let t = layers[0].rows();
    let n = (layers.len() + 1) * t;
    let mut cap = vec![vec![0.0; n]; n];
    for (i, a) in layers.iter().enumerate() {
        let l = i + 1;
        for j in 0..t {
            for k in 0..t {
                cap[l * t + j][(l - 1) * t + k] = a.at(j, k).max(0.0);
            }
        }
    }
    cap
}

/// Flow value from the top-layer CLS node to every input token.
pub fn attention_flow(layers: &[Tensor]) -> Tensor {
    let t = layers[0].rows();
    let cap = layered_capacities(layers);
    let source = layers.len() * t;
    Tensor::vector((0..t).map(|k| max_flow(&cap, source, k)).collect())
}
