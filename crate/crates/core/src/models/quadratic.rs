use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionClassifier, AttentionKind, Classifier};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits `z_k = ½ xᵀ A_k x + b_kᵀ x` with symmetric `A_k`; a smooth toy whose
/// gradient attributions rotate with `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    pub a: Vec<Tensor>,
    /// `[n, d]`, column `k` is `b_k`.
    pub b: Tensor,
}

impl QuadraticModel {
    pub fn new(a: Vec<Tensor>, b: Tensor) -> Result<Self> {
        let (n, d) = (b.rows(), b.cols());
        if b.rank() != 2 || a.len() != d || a.iter().any(|m| m.shape() != [n, n]) {
            return Err(Error::Shape(format!("{} curvature matrices for b {:?}", a.len(), b.shape())));
        }
        Ok(QuadraticModel { a, b })
    }

    /// Symmetric Gaussian curvatures with entries of standard deviation `scale`.
    pub fn random(n: usize, d: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..d)
            .map(|_| {
                let m = Tensor::randn(&[n, n], scale, &mut rng);
                m.add(&m.transpose()).expect("square").scale(0.5)
            })
            .collect();
        let b = Tensor::randn(&[n, d], 1.0, &mut rng);
        QuadraticModel { a, b }
    }
}

impl Classifier for QuadraticModel {
    fn input_len(&self) -> usize {
        self.b.rows()
    }

    fn num_classes(&self) -> usize {
        self.b.cols()
    }

    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>, _guided: bool) -> Result<Var<'g>> {
        let d = self.num_classes();
        let mut z = x.matmul(g.leaf(self.b.clone()))?;
        for (k, a) in self.a.iter().enumerate() {
            let q = x.matmul(g.leaf(a.clone()))?.dot(x)?.scale(0.5);
            z = z.add(q.scatter_add(Rc::new(vec![k]), &[1, d])?)?;
        }
        Ok(z)
    }
}

impl AttentionClassifier for QuadraticModel {
    fn logits_and_attention<'g>(&self, _g: &'g Graph, _x: Var<'g>) -> Result<(Var<'g>, Vec<Vec<Var<'g>>>)> {
        Err(Error::Contract("a quadratic model has no attention".into()))
    }

    fn attention_kind(&self) -> AttentionKind {
        AttentionKind::Softmax
    }
}
