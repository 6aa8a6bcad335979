use super::NormPolicy;
use crate::error::Result;
use crate::tensor::Tensor;

/// Nearest feasible point to `candidate`: inside the `radius`-ball around
/// `x`, and under [`NormPolicy::FixedInputNorm`] also on the sphere
/// `‖x'‖ = ‖x‖`. On the sphere the feasible set is a cap centred on `x`, so
/// out-of-cap points move along the great circle through `x`.
pub fn project(candidate: &Tensor, x: &Tensor, radius: f64, policy: NormPolicy) -> Result<Tensor> {
    match policy {
        NormPolicy::Free => {
            let d = candidate.sub(x)?;
            let n = d.norm();
            if n <= radius {
                Ok(candidate.clone())
            } else {
                x.axpy(radius / n, &d)
            }
        }
        NormPolicy::FixedInputNorm => {
            let r = x.norm();
            let c = candidate.norm();
            if r == 0.0 || c == 0.0 {
                return Ok(x.clone());
            }
            let y = candidate.scale(r / c);
            if y.sub(x)?.norm() <= radius || radius >= 2.0 * r {
                return Ok(y);
            }
            let xh = x.scale(1.0 / r);
            let w = y.axpy(-y.dot(&xh), &xh)?;
            let wn = w.norm();
            if wn == 0.0 {
                return Ok(x.clone());
            }
            let phi = 2.0 * (radius / (2.0 * r)).asin();
            xh.scale(r * phi.cos()).axpy(r * phi.sin() / wn, &w)
        }
    }
}
