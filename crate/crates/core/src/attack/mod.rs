//! Adversarial attribution sensitivity: projected ascent on the directional
//! change of an attribution map under a bounded input perturbation.

mod projection;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{gradient_map_var, target_class, GradientMethod};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{as_row, AttentionClassifier, Classifier};
use crate::tensor::Tensor;

pub use projection::project;

/// Directions probed when the objective is flat at the current iterate.
const ESCAPE_ITERS: usize = 8;
const ESCAPE_SCALE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// Every iterate keeps `‖x'‖ = ‖x‖` as well as `‖x' - x‖ <= ε`.
    FixedInputNorm,
    /// Only the ε-ball constraint.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackTarget {
    Gradient { method: GradientMethod },
    Attention { layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub radius: f64,
    pub gamma: f64,
    pub norm_policy: NormPolicy,
    /// Seeds the escape direction used at flat iterates.
    pub seed: u64,
}

impl AttackConfig {
    pub fn gradient_default() -> Self {
        AttackConfig {
            steps: 10,
            step_size: 0.01,
            radius: 1.0,
            gamma: 1e-4,
            norm_policy: NormPolicy::FixedInputNorm,
            seed: 0,
        }
    }

    pub fn attention_default() -> Self {
        AttackConfig { steps: 50, step_size: 0.05, ..Self::gradient_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.radius > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "attack needs step_size > 0, radius > 0, gamma >= 0 (got {}, {}, {})",
                self.step_size, self.radius, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRecord {
    /// Best objective `‖m(x) - m(x')‖ - γ‖l - l'‖` over the trajectory.
    pub not_r: f64,
    /// Angle between the clean and attacked maps, in radians.
    pub angle: f64,
    pub logit_drift: f64,
    pub x_adv: Tensor,
    pub converged: bool,
    pub steps_used: usize,
}

/// The map being attacked, recorded for one input row.
trait Target {
    /// Residual `m(x') - m(x)` and the log-probability row at `x'`.
    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)>;
    fn angle(&self, residual: &Tensor) -> f64;
}

struct GradTarget<'m, M: ?Sized> {
    model: &'m M,
    method: GradientMethod,
    class: usize,
    clean: Tensor,
}

impl<M: Classifier + ?Sized> Target for GradTarget<'_, M> {
    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let e = gradient_map_var(self.method, self.model, g, x, self.class)?;
        let r = e.l2_normalize_rows()?.sub(g.leaf(self.clean.clone()))?;
        let l = self.model.logits(g, x, false)?.log_softmax_rows()?;
        Ok((r, l))
    }

    fn angle(&self, residual: &Tensor) -> f64 {
        2.0 * (residual.norm() / 2.0).min(1.0).asin()
    }
}

struct AttTarget<'m, M: ?Sized> {
    model: &'m M,
    layer: usize,
    clean: Tensor,
}

fn head_mean<'g>(heads: &[Var<'g>]) -> Result<Var<'g>> {
    let mut acc = heads[0];
    for h in &heads[1..] {
        acc = acc.add(*h)?;
    }
    Ok(acc.scale(1.0 / heads.len() as f64))
}

impl<M: AttentionClassifier + ?Sized> Target for AttTarget<'_, M> {
    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (z, att) = self.model.logits_and_attention(g, x)?;
        let a = head_mean(&att[self.layer])?;
        Ok((a.sub(g.leaf(self.clean.clone()))?, z.log_softmax_rows()?))
    }

    fn angle(&self, residual: &Tensor) -> f64 {
        let attacked = self.clean.add(residual).expect("same shape");
        let cos = self.clean.dot(&attacked) / (self.clean.norm() * attacked.norm());
        if cos.is_finite() { cos.clamp(-1.0, 1.0).acos() } else { 0.0 }
    }
}

struct Eval {
    objective: f64,
    dist: f64,
    drift: f64,
    residual: Tensor,
    grad: Tensor,
}

fn evaluate(target: &dyn Target, x: &Tensor, clean_l: &Tensor, gamma: f64) -> Result<Eval> {
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let (r, l) = target.eval(&g, xv)?;
    let dist_v = r.norm();
    let drift_v = l.sub(g.leaf(clean_l.clone()))?.norm();
    let (dist, drift) = (dist_v.item(), drift_v.item());
    // the norm is not differentiable at zero; take the zero subgradient there
    let mut grad = Tensor::zeros(x.shape());
    if dist > 0.0 {
        grad = grad.add(&g.grad(dist_v, &[xv])?[0].value())?;
    }
    if drift > 0.0 && gamma > 0.0 {
        grad = grad.sub(&g.grad(drift_v, &[xv])?[0].value().scale(gamma))?;
    }
    Ok(Eval { objective: dist - gamma * drift, dist, drift, residual: (*r.value()).clone(), grad })
}

fn tangent(v: &Tensor, x: &Tensor, policy: NormPolicy) -> Result<Tensor> {
    let xx = x.dot(x);
    if policy == NormPolicy::FixedInputNorm && xx > 0.0 {
        v.axpy(-v.dot(x) / xx, x)
    } else {
        Ok(v.clone())
    }
}

/// Dominant direction of `JᵀJ` at a flat iterate, with `J` the Jacobian of
/// the attacked map, found by power iteration on small-scale probes.
fn escape_direction(
    target: &dyn Target,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Tensor>> {
    let g0 = Graph::new();
    let base = (*target.eval(&g0, g0.leaf(x.clone()))?.0.value()).clone();
    let h = ESCAPE_SCALE * cfg.radius.min(cfg.step_size);
    let noise: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let mut v = tangent(&Tensor::new(x.shape().to_vec(), noise)?, x, cfg.norm_policy)?;
    for _ in 0..ESCAPE_ITERS {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Ok(None);
        }
        let g = Graph::new();
        let pv = g.leaf(x.axpy(h / n, &v)?);
        let (r, _) = target.eval(&g, pv)?;
        let q = r.sub(g.leaf(base.clone()))?.norm_sq().scale(0.5);
        v = tangent(&g.grad(q, &[pv])?[0].value(), x, cfg.norm_policy)?;
    }
    Ok(Some(v))
}

/// `v` and `-v` increase the objective equally to first order at a flat
/// iterate; keep whichever does better after one full step.
fn better_side(
    target: &dyn Target,
    cur: &Tensor,
    x: &Tensor,
    v: Tensor,
    cfg: &AttackConfig,
    clean_l: &Tensor,
) -> Result<Tensor> {
    let n = v.norm();
    let score = |s: f64| -> Result<f64> {
        let p = project(&cur.axpy(s * cfg.step_size / n, &v)?, x, cfg.radius, cfg.norm_policy)?;
        Ok(evaluate(target, &p, clean_l, cfg.gamma)?.objective)
    };
    let (plus, minus) = (score(1.0)?, score(-1.0)?);
    Ok(if minus > plus { v.scale(-1.0) } else { v })
}

fn ascend(target: &dyn Target, x: &Tensor, cfg: &AttackConfig) -> Result<SensitivityRecord> {
    cfg.validate()?;
    let g = Graph::new();
    let clean_l = (*target.eval(&g, g.leaf(x.clone()))?.1.value()).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cur = x.clone();
    let mut best = SensitivityRecord {
        not_r: 0.0,
        angle: 0.0,
        logit_drift: 0.0,
        x_adv: x.clone(),
        converged: true,
        steps_used: 0,
    };
    for k in 0..=cfg.steps {
        let ev = evaluate(target, &cur, &clean_l, cfg.gamma)?;
        if !ev.objective.is_finite() || !ev.grad.all_finite() {
            best.converged = false;
            break;
        }
        best.steps_used = k;
        if ev.objective > best.not_r {
            best.not_r = ev.objective;
            best.angle = target.angle(&ev.residual);
            best.logit_drift = ev.drift;
            best.x_adv = cur.clone();
        }
        if k == cfg.steps {
            break;
        }
        let mut dir = tangent(&ev.grad, &cur, cfg.norm_policy)?;
        if !(dir.norm() > 0.0) && ev.dist == 0.0 {
            match escape_direction(target, &cur, cfg, &mut rng)? {
                Some(v) => dir = better_side(target, &cur, x, v, cfg, &clean_l)?,
                None => break,
            }
        }
        let n = dir.norm();
        if !(n > 0.0) {
            break;
        }
        cur = project(&cur.axpy(cfg.step_size / n, &dir)?, x, cfg.radius, cfg.norm_policy)?;
    }
    Ok(best)
}

fn check_layer<M: AttentionClassifier + ?Sized>(model: &M, x: &Tensor, layer: usize) -> Result<Tensor> {
    let g = Graph::new();
    let (_, att) = model.logits_and_attention(&g, g.leaf(as_row(x)?))?;
    let heads = att
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} out of range for depth {}", att.len())))?;
    let clean = (*head_mean(heads)?.value()).clone();
    if clean.norm() == 0.0 {
        return Err(Error::DegenerateAttribution);
    }
    Ok(clean)
}

fn gradient_target<'m, M: Classifier + ?Sized>(
    model: &'m M,
    method: GradientMethod,
    x: &Tensor,
) -> Result<GradTarget<'m, M>> {
    let class = target_class(model, x)?;
    let g = Graph::new();
    let e = gradient_map_var(method, model, &g, g.leaf(as_row(x)?), class)?;
    if e.value().norm() == 0.0 {
        return Err(Error::DegenerateAttribution);
    }
    let clean = (*e.l2_normalize_rows()?.value()).clone();
    Ok(GradTarget { model, method, class, clean })
}

/// Worst-case change of a gradient attribution within the ε-ball around `x`.
pub fn not_r_gradient<M: Classifier + ?Sized>(
    model: &M,
    method: GradientMethod,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<SensitivityRecord> {
    let target = gradient_target(model, method, x)?;
    let mut rec = ascend(&target, &as_row(x)?, cfg)?;
    rec.x_adv = rec.x_adv.reshape(x.shape())?;
    debug_assert!(cfg.gamma > 0.0 || rec.not_r <= 2.0 + 1e-9);
    Ok(rec)
}

/// Worst-case Frobenius change of the head-averaged attention of `layer`.
pub fn not_r_attention<M: AttentionClassifier + ?Sized>(
    model: &M,
    layer: usize,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<SensitivityRecord> {
    let clean = check_layer(model, x, layer)?;
    let target = AttTarget { model, layer, clean };
    let mut rec = ascend(&target, &as_row(x)?, cfg)?;
    rec.x_adv = rec.x_adv.reshape(x.shape())?;
    Ok(rec)
}

/// Dispatches on the configured target.
pub fn not_r<M: AttentionClassifier + ?Sized>(
    model: &M,
    target: AttackTarget,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<SensitivityRecord> {
    match target {
        AttackTarget::Gradient { method } => not_r_gradient(model, method, x, cfg),
        AttackTarget::Attention { layer } => not_r_attention(model, layer, x, cfg),
    }
}

/// A point drawn uniformly from the ε-sphere around `x`, then made feasible
/// under the norm policy.
pub fn random_perturbation(x: &Tensor, cfg: &AttackConfig, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let noise: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let d = Tensor::new(x.shape().to_vec(), noise)?;
    let d = d.scale(cfg.radius / d.norm());
    project(&x.add(&d)?, x, cfg.radius, cfg.norm_policy)
}

/// The attack objective at `x'` without any ascent.
pub fn objective_at<M: AttentionClassifier + ?Sized>(
    model: &M,
    target: AttackTarget,
    x: &Tensor,
    x_adv: &Tensor,
    gamma: f64,
) -> Result<f64> {
    let (xr, ar) = (as_row(x)?, as_row(x_adv)?);
    let g = Graph::new();
    let obj = |t: &dyn Target| -> Result<f64> {
        let clean_l = (*t.eval(&g, g.leaf(xr.clone()))?.1.value()).clone();
        let (r, l) = t.eval(&g, g.leaf(ar.clone()))?;
        Ok(r.value().norm() - gamma * l.value().sub(&clean_l)?.norm())
    };
    match target {
        AttackTarget::Gradient { method } => obj(&gradient_target(model, method, x)?),
        AttackTarget::Attention { layer } => {
            let clean = check_layer(model, x, layer)?;
            obj(&AttTarget { model, layer, clean })
        }
    }
}

/// Mean objective over `trials` random feasible perturbations.
pub fn average_sensitivity<M: AttentionClassifier + ?Sized>(
    model: &M,
    target: AttackTarget,
    x: &Tensor,
    cfg: &AttackConfig,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::Config("average sensitivity needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let xp = random_perturbation(x, cfg, &mut rng)?;
        total += objective_at(model, target, x, &xp, cfg.gamma)?;
    }
    Ok(total / trials as f64)
}
