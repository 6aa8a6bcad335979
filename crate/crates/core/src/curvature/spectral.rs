use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attribution::log_prob;
use crate::autodiff::{graph_fn, hvp, jvp, vjp, Graph, Var};
use crate::error::Result;
use crate::models::{as_row, Classifier};
use crate::tensor::Tensor;

pub const POWER_MAX_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-7;
pub const NORM_MAX_ITERS: usize = 100;
const START_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerResult {
    /// `|λ|` of the dominant eigenpair.
    pub value: f64,
    /// Rayleigh quotient with its sign.
    pub rayleigh: f64,
    pub vector: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

fn start_vector(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v = Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .expect("shape matches length");
    let norm = v.norm();
    v.scale(1.0 / norm)
}

/// Power iteration for a symmetric operator; stops when successive Rayleigh
/// quotients agree to `tol` relative.
pub fn power_iteration(
    mut op: impl FnMut(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    max_iters: usize,
    tol: f64,
) -> Result<PowerResult> {
    let mut v = start_vector(shape, START_SEED);
    let mut prev: Option<f64> = None;
    let mut out = PowerResult { value: 0.0, rayleigh: 0.0, vector: v.clone(), iterations: 0, converged: false };
    for it in 1..=max_iters {
        let w = op(&v)?;
        let rq = v.dot(&w);
        let norm = w.norm();
        out = PowerResult { value: rq.abs(), rayleigh: rq, vector: v.clone(), iterations: it, converged: false };
        if !(norm > 0.0) || !norm.is_finite() {
            out.converged = norm == 0.0;
            return Ok(out);
        }
        if let Some(p) = prev {
            if (rq - p).abs() <= tol * rq.abs() {
                out.converged = true;
                out.vector = w.scale(1.0 / norm);
                return Ok(out);
            }
        }
        prev = Some(rq);
        v = w.scale(1.0 / norm);
    }
    Ok(out)
}

/// Largest singular value of an operator given through `A v` and `Aᵀ u`.
pub fn operator_norm(
    mut apply: impl FnMut(&Tensor) -> Result<Tensor>,
    mut apply_t: impl FnMut(&Tensor) -> Result<Tensor>,
    shape: &[usize],
) -> Result<f64> {
    let r = power_iteration(|v| apply_t(&apply(v)?), shape, NORM_MAX_ITERS, POWER_TOL)?;
    Ok(r.value.sqrt())
}

/// Spectral norm of a matrix.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    let n = w.cols();
    let wt = w.transpose();
    operator_norm(
        |v| Ok(w.matmul(&v.reshape(&[n, 1])?)?.reshape(&[w.rows()])?),
        |u| Ok(wt.matmul(&u.reshape(&[w.rows(), 1])?)?.reshape(&[n])?),
        &[n],
    )
}

/// Spectral norm of the Jacobian of a graph function at `point`.
pub fn jacobian_norm<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    operator_norm(|v| jvp(&f, point, v), |u| vjp(&f, point, u), point.shape())
}

fn ritz_extreme(alpha: &[f64], beta: &[f64]) -> (f64, DVector<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let (idx, theta) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
    (theta, eig.eigenvectors.column(idx).into_owned())
}

/// Largest-magnitude eigenpair of a symmetric, possibly indefinite operator
/// by Lanczos with full reorthogonalization. Unlike plain power iteration it
/// separates `λ` from a nearby `-λ`.
pub fn lanczos_extreme(
    mut op: impl FnMut(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    max_iters: usize,
    tol: f64,
) -> Result<PowerResult> {
    let n: usize = shape.iter().product();
    let steps = max_iters.min(n).max(1);
    let mut basis: Vec<Tensor> = vec![start_vector(shape, START_SEED)];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut done = false;
    loop {
        let j = alpha.len();
        let mut w = op(&basis[j])?;
        alpha.push(basis[j].dot(&w));
        for _ in 0..2 {
            for q in &basis {
                w = w.axpy(-q.dot(&w), q)?;
            }
        }
        let b = w.norm();
        let k = alpha.len();
        let scale = alpha.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let invariant = !(b > 1e-12 * scale);
        if invariant || k == steps || k % 10 == 0 {
            let (theta, s) = ritz_extreme(&alpha, &beta);
            let residual = if invariant { 0.0 } else { b * s[k - 1].abs() };
            done = residual <= tol * theta.abs() || invariant;
            if done || k == steps {
                let mut vector = Tensor::zeros(shape);
                for (q, c) in basis.iter().zip(s.iter()) {
                    vector = vector.axpy(*c, q)?;
                }
                return Ok(PowerResult { value: theta.abs(), rayleigh: theta, vector, iterations: k, converged: done });
            }
        }
        debug_assert!(!done);
        beta.push(b);
        basis.push(w.scale(1.0 / b));
    }
}

/// Dominant eigenpair of the input Hessian of `-l_i` at `x`.
pub fn input_hessian_lambda_max<M: Classifier + ?Sized>(model: &M, x: &Tensor, class: usize) -> Result<PowerResult> {
    let row = as_row(x)?;
    let f = graph_fn(|g, xv| Ok(log_prob(model, g, xv, class, false)?.neg()));
    let mut r = lanczos_extreme(|v| hvp(f, &row, &v.reshape(&[1, x.len()])?)?.reshape(x.shape()), x.shape(), POWER_MAX_ITERS, POWER_TOL)?;
    r.vector = r.vector.reshape(x.shape())?;
    Ok(r)
}
