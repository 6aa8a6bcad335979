use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

/// Shift-stable `log sum_j exp(z_j)`.
pub fn lse(z: &Tensor) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Contract("log-sum-exp of an empty vector".into()));
    }
    let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

pub fn softmax(z: &Tensor) -> Tensor {
    Tensor::vector(z.softmax_rows().into_data())
}

/// Log-probability of class `i`: `z_i - lse(z)`.
pub fn neg_log_prob(z: &Tensor, i: usize) -> Result<f64> {
    if i >= z.len() {
        return Err(Error::ClassIndex { index: i, len: z.len() });
    }
    Ok(z.data()[i] - lse(z)?)
}

/// Logits together with their softmax and log-softmax views.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBundle {
    pub z: Tensor,
    pub p: Tensor,
    pub l: Tensor,
    pub lse: f64,
}

impl LogitBundle {
    pub fn from_logits(z: &Tensor) -> Result<Self> {
        let lse = lse(z)?;
        let z = Tensor::vector(z.data().to_vec());
        let l = z.map(|v| v - lse);
        let p = softmax(&z);
        Ok(LogitBundle { z, p, l, lse })
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        self.l.argmax()
    }

    pub fn num_classes(&self) -> usize {
        self.z.len()
    }
}

/// `diag(p) - p p^T`.
pub fn softmax_jacobian(p: &Tensor) -> Tensor {
    let d = p.len();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = if i == j { p.data()[i] } else { 0.0 } - p.data()[i] * p.data()[j];
        }
    }
    Tensor::from_parts(vec![d, d], data)
}

/// Pins a closure to the higher-ranked signature expected by the helpers below.
pub fn graph_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    f
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, point: &Tensor, h: f64) -> Tensor {
    let mut out = point.clone();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Gradient of a graph-built scalar function at `point`.
pub fn grad_at<F>(f: F, point: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    Ok((*g.grad(y, &[x])?[0].value()).clone())
}

/// Hessian-vector product `H v` computed as the gradient of `<grad f, v>`.
pub fn hvp<F>(f: F, point: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if point.shape() != v.shape() {
        return Err(Error::Shape(format!("hvp point {:?} vs direction {:?}", point.shape(), v.shape())));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let gx = g.grad(y, &[x])?[0];
    let s = gx.dot(g.leaf(v.clone()))?;
    Ok((*g.grad(s, &[x])?[0].value()).clone())
}

/// Jacobian-vector product of a tensor-valued graph function, by
/// differentiating a vector-Jacobian product with respect to its cotangent.
pub fn jvp<F>(f: F, point: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if point.shape() != v.shape() {
        return Err(Error::Shape(format!("jvp point {:?} vs direction {:?}", point.shape(), v.shape())));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let u = g.leaf(Tensor::zeros(&y.shape()));
    let vjp = g.grad(y.dot(u)?, &[x])?[0];
    let s = vjp.dot(g.leaf(v.clone()))?;
    Ok((*g.grad(s, &[u])?[0].value()).clone())
}

/// Vector-Jacobian product `J^T u` of a tensor-valued graph function.
pub fn vjp<F>(f: F, point: &Tensor, u: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    if y.shape() != u.shape() {
        return Err(Error::Shape(format!("vjp output {:?} vs cotangent {:?}", y.shape(), u.shape())));
    }
    let s = y.dot(g.leaf(u.clone()))?;
    Ok((*g.grad(s, &[x])?[0].value()).clone())
}

/// Dense Hessian of a scalar graph function, one gradient row per coordinate.
pub fn dense_hessian<F>(f: F, point: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let n = point.len();
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let gx = g.grad(y, &[x])?[0];
    let flat = gx.reshape(&[n])?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let comp = flat.gather(std::rc::Rc::new(vec![i]), &[])?;
        let row = g.grad(comp, &[x])?[0];
        data.extend_from_slice(row.value().data());
    }
    Tensor::matrix(n, n, data)
}
