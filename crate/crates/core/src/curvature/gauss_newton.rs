use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_hessian, grad_at, graph_fn, jvp, softmax, softmax_jacobian, Graph, Var};
use crate::error::{Error, Result};
use crate::models::{as_row, Classifier, Model};
use crate::tensor::Tensor;

/// Largest differentiated dimension accepted by the dense decomposition.
pub const DENSE_LIMIT: usize = 64;

/// A network seen as a function of its flattened parameters.
pub trait ParamFn {
    fn flat_params(&self) -> Tensor;
    /// Outputs `[1, d]` for one input with parameters given as a flat node.
    fn outputs_at<'g>(&self, g: &'g Graph, theta: Var<'g>, x: &Tensor) -> Result<Var<'g>>;
}

impl ParamFn for Model {
    fn flat_params(&self) -> Tensor {
        self.params.flatten()
    }

    fn outputs_at<'g>(&self, g: &'g Graph, theta: Var<'g>, x: &Tensor) -> Result<Var<'g>> {
        let views = self.params.unflatten(theta)?;
        Ok(self.forward_with(&views, g.leaf(as_row(x)?), false)?.logits)
    }
}

/// Hessian of `-l_j` split as `H = G + F`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnDecomposition {
    pub h: Tensor,
    /// `Jᵀ (diag p - p pᵀ) J`.
    pub g: Tensor,
    /// `Σ_k p_k ∇²z_k - ∇²z_j`.
    pub f: Tensor,
    /// `max |H - (G + F)|`.
    pub max_err: f64,
}

fn decompose<L>(logits: L, point: &Tensor, class: usize) -> Result<GnDecomposition>
where
    L: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let n = point.len();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { dim: n, limit: DENSE_LIMIT });
    }
    let g0 = Graph::new();
    let z = (*logits(&g0, g0.leaf(point.clone()))?.value()).clone();
    let d = z.len();
    if class >= d {
        return Err(Error::ClassIndex { index: class, len: d });
    }
    let p = softmax(&z.reshape(&[d])?);
    let mut jac = Vec::with_capacity(d * n);
    let mut f = Tensor::zeros(&[n, n]);
    for k in 0..d {
        let ck = graph_fn(|g, w| logits(g, w)?.gather(Rc::new(vec![k]), &[]));
        jac.extend_from_slice(grad_at(&ck, point)?.data());
        let hk = dense_hessian(&ck, point)?;
        let weight = p.data()[k] - if k == class { 1.0 } else { 0.0 };
        f = f.axpy(weight, &hk)?;
    }
    let j = Tensor::matrix(d, n, jac)?;
    let g = j.transpose().matmul(&softmax_jacobian(&p))?.matmul(&j)?;
    let h = dense_hessian(
        |gr, w| Ok(logits(gr, w)?.log_softmax_rows()?.gather(Rc::new(vec![class]), &[])?.neg()),
        point,
    )?;
    let max_err = h.sub(&g.add(&f)?)?.max_abs();
    Ok(GnDecomposition { h, g, f, max_err })
}

/// Decomposition of the input Hessian of `-l_j` at `x`.
pub fn gn_decomposition_input<M: Classifier + ?Sized>(model: &M, x: &Tensor, class: usize) -> Result<GnDecomposition> {
    let n = x.len();
    decompose(|g, w| model.logits(g, w.reshape(&[1, n])?, false), &x.reshape(&[n])?, class)
}

/// Decomposition of the parameter Hessian of `-l_j` for one input `x`.
pub fn gn_decomposition_params<P: ParamFn + ?Sized>(model: &P, x: &Tensor, class: usize) -> Result<GnDecomposition> {
    decompose(|g, theta| model.outputs_at(g, theta, x), &model.flat_params(), class)
}

/// Curvature of the loss with respect to the outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputCurvature {
    /// `diag(p) - p pᵀ`, the cross-entropy Hessian in logit space.
    CrossEntropy,
    /// Identity, the Hessian of `½‖z - y‖²`.
    SquaredError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

fn output_curvature(z: &Tensor, kind: OutputCurvature) -> Tensor {
    match kind {
        OutputCurvature::CrossEntropy => softmax_jacobian(&softmax(z)),
        OutputCurvature::SquaredError => Tensor::eye(z.len()),
    }
}

/// Batch-averaged `tr(G_θ) = mean_b tr(J_bᵀ M_b J_b)`.
pub fn param_gn_trace<P: ParamFn + ?Sized>(
    model: &P,
    batch: &Tensor,
    curvature: OutputCurvature,
    method: TraceMethod,
) -> Result<f64> {
    if batch.rank() != 2 || batch.rows() == 0 {
        return Err(Error::Shape(format!("trace needs a nonempty [B, n] batch, got {:?}", batch.shape())));
    }
    let theta = model.flat_params();
    let mut rng = match method {
        TraceMethod::Hutchinson { probes: 0, .. } => {
            return Err(Error::Config("Hutchinson trace needs at least one probe".into()));
        }
        TraceMethod::Hutchinson { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        TraceMethod::Exact => None,
    };
    let mut total = 0.0;
    for b in 0..batch.rows() {
        let x = Tensor::vector(batch.row_slice(b).to_vec());
        let g = Graph::new();
        let tv = g.leaf(theta.clone());
        let z = model.outputs_at(&g, tv, &x)?;
        let d = z.value().len();
        let m = output_curvature(&z.value().reshape(&[d])?, curvature);
        match (method, rng.as_mut()) {
            (TraceMethod::Hutchinson { probes, .. }, Some(rng)) => {
                let f = graph_fn(|gr, t| model.outputs_at(gr, t, &x));
                let mut acc = 0.0;
                for _ in 0..probes {
                    let v: Vec<f64> = (0..theta.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                    let u = jvp(&f, &theta, &Tensor::vector(v))?.reshape(&[d, 1])?;
                    acc += u.transpose().matmul(&m.matmul(&u)?)?.item();
                }
                total += acc / probes as f64;
            }
            _ => {
                let zf = z.reshape(&[d])?;
                let rows: Vec<Tensor> = (0..d)
                    .map(|k| {
                        let zk = zf.gather(Rc::new(vec![k]), &[])?;
                        Ok((*g.grad(zk, &[tv])?[0].value()).clone())
                    })
                    .collect::<Result<_>>()?;
                for k in 0..d {
                    for l in 0..d {
                        let mkl = m.at(k, l);
                        if mkl != 0.0 {
                            total += mkl * rows[k].dot(&rows[l]);
                        }
                    }
                }
            }
        }
    }
    Ok(total / batch.rows() as f64)
}
