use super::gauss_newton::ParamFn;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deep scalar linear network `f(x) = w_L ··· w_1 x`, the smallest model with
/// a continuum of minima of different sharpness.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearChain {
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdOutcome {
    pub steps: usize,
    pub loss: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl LinearChain {
    fn output<'g>(&self, theta: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let n = self.weights.len();
        let mut prod = x;
        for k in 0..n {
            let w = theta.gather(std::rc::Rc::new(vec![k]), &[1, 1])?;
            prod = prod.matmul(w)?;
        }
        Ok(prod)
    }

    /// `½ mean_b (f(x_b) - y_b)²`.
    pub fn loss(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let p: f64 = self.weights.iter().product();
        xs.iter().zip(ys).map(|(x, y)| 0.5 * (p * x - y).powi(2)).sum::<f64>() / xs.len() as f64
    }

    /// Full-batch gradient descent until the loss drops below `tol`, blows
    /// past `1e6`, or `max_steps` run out.
    pub fn train_gd(&mut self, xs: &[f64], ys: &[f64], lr: f64, max_steps: usize, tol: f64) -> Result<GdOutcome> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Shape("regression data needs matching nonempty x and y".into()));
        }
        let b = xs.len();
        let x = Tensor::matrix(b, 1, xs.to_vec())?;
        let y = Tensor::matrix(b, 1, ys.to_vec())?;
        for step in 0..max_steps {
            let loss = self.loss(xs, ys);
            if !loss.is_finite() || loss > 1e6 {
                return Ok(GdOutcome { steps: step, loss, converged: false, diverged: true });
            }
            if loss < tol {
                return Ok(GdOutcome { steps: step, loss, converged: true, diverged: false });
            }
            let g = Graph::new();
            let theta = g.leaf(Tensor::vector(self.weights.clone()));
            let r = self.output(theta, g.leaf(x.clone()))?.sub(g.leaf(y.clone()))?;
            let l = r.norm_sq().scale(0.5 / b as f64);
            let grad = g.grad(l, &[theta])?[0].value();
            for (w, gw) in self.weights.iter_mut().zip(grad.data()) {
                *w -= lr * gw;
            }
        }
        let loss = self.loss(xs, ys);
        Ok(GdOutcome { steps: max_steps, loss, converged: loss < tol, diverged: !loss.is_finite() })
    }
}

impl ParamFn for LinearChain {
    fn flat_params(&self) -> Tensor {
        Tensor::vector(self.weights.clone())
    }

    fn outputs_at<'g>(&self, g: &'g Graph, theta: Var<'g>, x: &Tensor) -> Result<Var<'g>> {
        self.output(theta, g.leaf(x.reshape(&[1, 1])?))
    }
}
