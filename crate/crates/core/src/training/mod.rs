//! Minibatch SGD with per-epoch exponential decay, early stopping on the
//! training loss and the robustness strategies used for comparison.

mod checkpoint;
mod strategies;

use std::fmt;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::target_class;
use crate::autodiff::{Graph, Var};
use crate::curvature::{entropy_stats, input_hessian_lambda_max, param_gn_trace, OutputCurvature, TraceMethod};
use crate::error::{Error, Result};
use crate::models::{Model, ParamGroup, ParamSet};
use crate::tensor::Tensor;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use strategies::{
    activation_swap, atr_perturb, ecr_penalty, ecr_penalty_var, sam_step, sgd_step, SwapMode, SwapTarget,
};

pub const DEFAULT_DECAY: f64 = 1.0 - 1e-3;
pub const DAGGER_RATIO: f64 = 10.0;
/// Loss growth over the initial loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Strategy {
    Base,
    /// Activation replaced before training.
    Aar { target: SwapTarget },
    /// Activation replaced after training, for evaluation only.
    Par { target: SwapTarget },
    Ecr { lambda: f64 },
    Atr { eps: f64, steps: usize },
    Sam { rho: f64 },
    Icr,
    IcrDagger { ratio: f64 },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Aar { .. } => "aar",
            Strategy::Par { .. } => "par",
            Strategy::Ecr { .. } => "ecr",
            Strategy::Atr { .. } => "atr",
            Strategy::Sam { .. } => "sam",
            Strategy::Icr => "icr",
            Strategy::IcrDagger { .. } => "icr_dagger",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            Strategy::Ecr { lambda } if !(lambda >= 0.0) => bad(format!("ecr lambda must be >= 0, got {lambda}")),
            Strategy::Atr { eps, .. } if !(eps >= 0.0) => bad(format!("atr eps must be >= 0, got {eps}")),
            Strategy::Atr { steps: 0, .. } => bad("atr needs at least one step".into()),
            Strategy::Sam { rho } if !(rho >= 0.0) => bad(format!("sam rho must be >= 0, got {rho}")),
            Strategy::IcrDagger { ratio } if !(ratio > 0.0) => bad(format!("lr ratio must be > 0, got {ratio}")),
            Strategy::Aar { target: SwapTarget::Softplus(b) } | Strategy::Par { target: SwapTarget::Softplus(b) }
                if !(b > 0.0) =>
            {
                bad(format!("softplus beta must be > 0, got {b}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Curvature and entropy measurements taken during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    /// Probe every `every` epochs and after the last one.
    pub every: usize,
    /// Leading training points used by the probes.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Applied once per epoch.
    pub decay_factor: f64,
    pub strategy: Strategy,
    pub stop_loss_threshold: f64,
    /// Epochs during which early stopping is disabled; 10% of `max_epochs` when absent.
    pub warmup_epochs: Option<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub probe: Option<ProbeSpec>,
}

impl TrainConfig {
    pub fn new(base_lr: f64, strategy: Strategy) -> Self {
        TrainConfig {
            base_lr,
            decay_factor: DEFAULT_DECAY,
            strategy,
            stop_loss_threshold: 0.05,
            warmup_epochs: None,
            max_epochs: 100,
            batch_size: 32,
            seed: 0,
            probe: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if matches!(self.probe, Some(p) if p.every == 0) {
            return Err(Error::Config("probe interval must be positive".into()));
        }
        self.strategy.validate()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.max_epochs / 10)
    }

    /// Base learning rate at `epoch` before group multipliers.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi(epoch as i32)
    }
}

/// Inputs `[N, n]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} labels for inputs {:?}", labels.len(), inputs.shape())));
        }
        Ok(LabeledData { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> Tensor {
        Tensor::vector(self.inputs.row_slice(i).to_vec())
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledData {
        let n = self.dim();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.inputs.row_slice(i));
        }
        LabeledData {
            inputs: Tensor::new(vec![idx.len(), n], data).expect("rows of equal width"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn head(&self, k: usize) -> LabeledData {
        self.subset(&(0..k.min(self.len())).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossThreshold,
    MaxEpochs,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::LossThreshold => "loss_threshold",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Cross-entropy over the whole training set after the epoch.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub group: ParamGroup,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub gn_trace_param: f64,
    pub lambda_max: f64,
    /// Layer-0 mean row entropy, ViT only.
    pub attention_entropy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub updates: Vec<UpdateRecord>,
    pub probes: Vec<ProbeRecord>,
    pub stop: StopReason,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.train_loss)
    }

    /// Only runs that reached the loss threshold enter matched-loss comparisons.
    pub fn is_comparable(&self) -> bool {
        self.stop == StopReason::LossThreshold
    }
}

/// Mean cross-entropy of logits `[B, d]` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let d = logits.cols();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.row_slice(b);
        if y >= d {
            return Err(Error::ClassIndex { index: y, len: d });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

pub fn accuracy(model: &Model, data: &LabeledData) -> Result<f64> {
    let logits = model.predict(&data.inputs)?;
    let hits = (0..data.len())
        .filter(|&b| Tensor::vector(logits.row_slice(b).to_vec()).argmax() == data.labels[b])
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn dataset_loss(model: &Model, data: &LabeledData) -> Result<f64> {
    cross_entropy(&model.predict(&data.inputs)?, &data.labels)
}

/// Graph node for the mean cross-entropy of a batch.
pub fn cross_entropy_var<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let d = logits.shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= d) {
        return Err(Error::ClassIndex { index: y, len: d });
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(b, &y)| b * d + y).collect();
    Ok(logits.log_softmax_rows()?.gather(Rc::new(idx), &[labels.len()])?.sum().scale(-1.0 / labels.len() as f64))
}

/// Training objective of one batch and its gradient with respect to every
/// parameter, in `ParamSet` order.
pub fn loss_and_grads(model: &Model, batch: &LabeledData, strategy: &Strategy) -> Result<(f64, Vec<Tensor>)> {
    let adv = match *strategy {
        Strategy::Atr { eps, steps } => Some(atr_perturb(model, batch, eps, steps)?),
        _ => None,
    };
    let g = Graph::new();
    let params = model.bind(&g);
    let x = g.leaf(batch.inputs.clone());
    let z = model.forward_with(&params, x, false)?.logits;
    let mut loss = cross_entropy_var(z, &batch.labels)?;
    match *strategy {
        Strategy::Ecr { lambda } if lambda != 0.0 => {
            loss = loss.add(ecr_penalty_var(&g, z, x, &batch.labels, lambda)?)?;
        }
        Strategy::Atr { .. } => {
            let xa = g.leaf(adv.expect("perturbed batch").inputs);
            let za = model.forward_with(&params, xa, false)?.logits;
            loss = loss.add(cross_entropy_var(za, &batch.labels)?)?;
        }
        _ => {}
    }
    let grads = g.grad(loss, &params)?;
    Ok((loss.item(), grads.iter().map(|v| (*v.value()).clone()).collect()))
}

fn probe(model: &Model, data: &LabeledData, spec: &ProbeSpec, epoch: usize) -> Result<ProbeRecord> {
    let sub = data.head(spec.samples);
    let gn = param_gn_trace(model, &sub.inputs, OutputCurvature::CrossEntropy, TraceMethod::Exact)?;
    let mut lam = 0.0;
    let mut ent = 0.0;
    for i in 0..sub.len() {
        let x = sub.row(i);
        let x = if model.is_vit() { x.reshape(&model.spec.input_dims)? } else { x };
        lam += input_hessian_lambda_max(model, &x, target_class(model, &x)?)?.value;
        if model.is_vit() {
            ent += entropy_stats(model, &x)?.entropy[0];
        }
    }
    let n = sub.len() as f64;
    Ok(ProbeRecord {
        epoch,
        gn_trace_param: gn,
        lambda_max: lam / n,
        attention_entropy: model.is_vit().then_some(ent / n),
    })
}

fn log_updates(log: &mut Vec<UpdateRecord>, params: &ParamSet, step: usize, lr: f64) {
    for group in [ParamGroup::Backbone, ParamGroup::Classifier] {
        if let Some(p) = params.iter().find(|p| p.group == group) {
            log.push(UpdateRecord { step, group, lr: lr * p.lr_mult });
        }
    }
}

/// Result of a training run: the returned model is the final one, or the
/// best checkpoint when training diverged.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: TrainTrace,
}

pub fn sgd_train(model: &Model, train: &LabeledData, val: Option<&LabeledData>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = match cfg.strategy {
        Strategy::Aar { target } => activation_swap(model, target, SwapMode::Ante),
        _ => model.clone(),
    };
    model.params.set_group_ratio(match cfg.strategy {
        Strategy::IcrDagger { ratio } => ratio,
        _ => 1.0,
    })?;
    let initial_loss = dataset_loss(&model, train)?;
    let mut trace = TrainTrace { initial_loss, epochs: vec![], updates: vec![], probes: vec![], stop: StopReason::MaxEpochs };
    let mut best: Option<(f64, ParamSet)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let loss = match cfg.strategy {
                Strategy::Sam { rho } => {
                    let (loss, g0) = loss_and_grads(&model, &batch, &cfg.strategy)?;
                    sam_step(&mut model.params, &g0, rho, lr, |p| {
                        let shifted = Model { spec: model.spec.clone(), params: p.clone() };
                        Ok(loss_and_grads(&shifted, &batch, &cfg.strategy)?.1)
                    })?;
                    loss
                }
                _ => {
                    let (loss, grads) = loss_and_grads(&model, &batch, &cfg.strategy)?;
                    sgd_step(&mut model.params, &grads, lr)?;
                    loss
                }
            };
            log_updates(&mut trace.updates, &model.params, step, lr);
            step += 1;
            if !loss.is_finite() {
                diverged = true;
                break;
            }
        }
        let train_loss = if diverged { f64::NAN } else { dataset_loss(&model, train)? };
        if diverged || !train_loss.is_finite() || train_loss > DIVERGENCE_FACTOR * initial_loss {
            if epoch == 0 {
                return Err(Error::DivergedAtStart);
            }
            log::warn!("training diverged at epoch {epoch} (lr {lr})");
            trace.stop = StopReason::Diverged;
            model.params = best.expect("a finite epoch precedes divergence").1;
            break;
        }
        let val_accuracy = val.map(|v| accuracy(&model, v)).transpose()?;
        trace.epochs.push(EpochRecord { epoch, lr, train_loss, val_accuracy });
        if best.as_ref().is_none_or(|(l, _)| train_loss < *l) {
            best = Some((train_loss, model.params.clone()));
        }
        let stop = epoch + 1 > cfg.warmup() && train_loss < cfg.stop_loss_threshold;
        if let Some(spec) = &cfg.probe {
            if (epoch + 1) % spec.every == 0 || stop || epoch + 1 == cfg.max_epochs {
                trace.probes.push(probe(&model, train, spec, epoch)?);
            }
        }
        if stop {
            trace.stop = StopReason::LossThreshold;
            break;
        }
    }
    if let Strategy::Par { target } = cfg.strategy {
        model = activation_swap(&model, target, SwapMode::Post);
    }
    Ok(TrainOutcome { model, trace })
}
