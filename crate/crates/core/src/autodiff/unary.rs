//! Elementwise nonlinearities and their derivative chains.
//!
//! Every kind knows how to express its own derivative as another graph
//! expression, so the chain is closed under differentiation and gradients
//! of any order stay exact.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

/// Above this value of `beta * x` softplus is evaluated as the identity.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Recip,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    /// ReLU whose backward pass also zeroes negative adjoints.
    GuidedRelu,
    /// Heaviside step; carries no gradient.
    Step,
    Square,
    Softplus(f64),
    /// Derivative of `Softplus(beta)`: `sigmoid(beta x)`, exactly 1 on the linear branch.
    SoftplusGrad(f64),
    Gelu,
    /// `Phi(x) + x phi(x)`.
    GeluGrad,
    /// `phi(x) * sum_k c_k x^k` with `phi` the standard normal density.
    PhiPoly(Rc<Vec<f64>>),
    Elu,
    EluGrad,
    EluGrad2,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn softplus(beta: f64, x: f64) -> f64 {
    let bx = beta * x;
    if bx > SOFTPLUS_LINEAR_THRESHOLD {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

/// Coefficients of `P'(x) - x P(x)`, the polynomial of `d/dx [phi(x) P(x)] / phi(x)`.
pub(crate) fn phi_poly_derivative(c: &[f64]) -> Vec<f64> {
    let n = c.len() + 1;
    (0..n)
        .map(|k| {
            let dp = if k + 1 < c.len() { (k + 1) as f64 * c[k + 1] } else { 0.0 };
            let xp = if k >= 1 && k - 1 < c.len() { c[k - 1] } else { 0.0 };
            dp - xp
        })
        .collect()
}

impl Unary {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Recip => 1.0 / x,
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu | Unary::GuidedRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => x * x,
            Unary::Softplus(beta) => softplus(*beta, x),
            Unary::SoftplusGrad(beta) => {
                let bx = beta * x;
                if bx > SOFTPLUS_LINEAR_THRESHOLD {
                    1.0
                } else {
                    sigmoid(bx)
                }
            }
            Unary::Gelu => gelu(x),
            Unary::GeluGrad => std_normal_cdf(x) + x * std_normal_pdf(x),
            Unary::PhiPoly(c) => std_normal_pdf(x) * poly(c, x),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::EluGrad => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::EluGrad2 => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
        }
    }
}
