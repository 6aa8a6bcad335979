//! Toy classifiers: a multilayer perceptron and a tiny vision transformer.

pub mod attention;
mod mlp;
mod params;
mod quadratic;
mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LogitBundle, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{AttentionKind, KernelFeature};
pub use params::{group_learning_rates, GroupRates, Param, ParamGroup, ParamSet};
pub use quadratic::QuadraticModel;
pub use vit::VitSpec;


/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", content = "beta")]
pub enum Activation {
    Relu,
    Softplus(f64),
    Gelu,
    EluPlusOne,
    Tanh,
}

impl Activation {
    pub(crate) fn apply<'g>(&self, x: Var<'g>, guided: bool) -> Var<'g> {
        match self {
            Activation::Relu if guided => x.unary(crate::autodiff::Unary::GuidedRelu),
            Activation::Relu => x.relu(),
            Activation::Softplus(beta) => x.softplus(*beta),
            Activation::Gelu => x.gelu(),
            Activation::EluPlusOne => x.elu().add_scalar(1.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Hidden layer widths; the input and output widths come from the spec.
    Mlp { hidden: Vec<usize> },
    Vit(VitSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `[n]` for an MLP, `[channels, side, side]` for a ViT.
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: &[usize], num_classes: usize, activation: Activation) -> Self {
        ModelSpec {
            arch: Architecture::Mlp { hidden: hidden.to_vec() },
            input_dims: vec![input],
            num_classes,
            activation,
        }
    }

    pub fn vit(channels: usize, side: usize, vit: VitSpec, num_classes: usize, activation: Activation) -> Self {
        ModelSpec {
            arch: Architecture::Vit(vit),
            input_dims: vec![channels, side, side],
            num_classes,
            activation,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_len() == 0 {
            return Err(Error::Config("model needs at least one input and one class".into()));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if self.input_dims.len() != 1 || hidden.contains(&0) {
                    return Err(Error::Config("mlp needs a flat input and nonzero widths".into()));
                }
            }
            Architecture::Vit(v) => v.validate(&self.input_dims)?,
        }
        Ok(())
    }
}

/// Differentiable outputs of one forward pass.
pub struct Forward<'g> {
    /// `[B, d]` logits.
    pub logits: Var<'g>,
    /// MLP layer inputs `h_0 .. h_{L-1}` (empty for a ViT).
    pub hidden: Vec<Var<'g>>,
    /// ViT attention scores, indexed `[sample][layer][head]`, each `T x T`.
    pub attention: Vec<Vec<Vec<Var<'g>>>>,
}

/// Per-layer, per-head attention scores for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Tensor>>,
    pub normalized: bool,
}

impl AttentionStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |a| a.rows())
    }

    /// Head-averaged `T x T` map of one layer.
    pub fn head_mean(&self, layer: usize) -> Tensor {
        let heads = &self.layers[layer];
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            acc = acc.add(h).expect("heads share a shape");
        }
        acc.scale(1.0 / heads.len() as f64)
    }

    /// Applies a row softmax to every map of an unnormalized stack.
    pub fn softmax_normalized(&self) -> AttentionStack {
        if self.normalized {
            return self.clone();
        }
        AttentionStack {
            layers: self.layers.iter().map(|l| l.iter().map(|a| a.softmax_rows()).collect()).collect(),
            normalized: true,
        }
    }
}

/// A classifier whose logits can be recorded into a [`Graph`] for one input row.
pub trait Classifier {
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Logits `[1, d]` for an input `[1, n]`. `guided` switches ReLU sites to the
    /// guided-backprop rule.
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>, guided: bool) -> Result<Var<'g>>;

    fn logit_bundle(&self, x: &Tensor) -> Result<LogitBundle> {
        let g = Graph::new();
        let xv = g.leaf(as_row(x)?);
        let z = self.logits(&g, xv, false)?;
        LogitBundle::from_logits(&z.value())
    }
}

/// Classifiers exposing attention maps.
pub trait AttentionClassifier: Classifier {
    /// Logits `[1, d]` and attention maps `[layer][head]` for an input `[1, n]`.
    fn logits_and_attention<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Vec<Vec<Var<'g>>>)>;
    fn attention_kind(&self) -> AttentionKind;
}

/// Reshapes any tensor into a single row `[1, n]`.
pub fn as_row(x: &Tensor) -> Result<Tensor> {
    x.reshape(&[1, x.len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &spec.arch {
            Architecture::Mlp { hidden } => mlp::init(&spec, hidden, &mut rng),
            Architecture::Vit(v) => vit::init(&spec, v, &mut rng),
        };
        Ok(Model { spec, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records every parameter as a leaf of `g`, in `ParamSet` order.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Forward pass on a batch `[B, n]` with parameters already bound to `g`.
    pub fn forward_with<'g>(
        &self,
        params: &[Var<'g>],
        x: Var<'g>,
        guided: bool,
    ) -> Result<Forward<'g>> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.spec.input_len() {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input length {}",
                xs,
                self.spec.input_len()
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter binding does not match the model".into()));
        }
        match &self.spec.arch {
            Architecture::Mlp { .. } => mlp::forward(&self.spec, params, x, guided),
            Architecture::Vit(v) => vit::forward(&self.spec, v, params, x, guided),
        }
    }

    /// Logits, activation trace and attention maps for one input, as values.
    pub fn evaluate(&self, x: &Tensor) -> Result<(LogitBundle, Vec<Tensor>, Option<AttentionStack>)> {
        let g = Graph::new();
        let params = self.bind(&g);
        let xv = g.leaf(as_row(x)?);
        let f = self.forward_with(&params, xv, false)?;
        let bundle = LogitBundle::from_logits(&f.logits.value())?;
        let trace = f.hidden.iter().map(|h| (*h.value()).clone()).collect();
        let stack = match (&self.spec.arch, f.attention.first()) {
            (Architecture::Vit(v), Some(layers)) => Some(AttentionStack {
                layers: layers.iter().map(|heads| heads.iter().map(|a| (*a.value()).clone()).collect()).collect(),
                normalized: v.attention.is_normalized(),
            }),
            _ => None,
        };
        Ok((bundle, trace, stack))
    }

    /// Logits for a whole batch as a `[B, d]` tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.bind(&g);
        let f = self.forward_with(&params, g.leaf(x.clone()), false)?;
        let out = (*f.logits.value()).clone();
        Ok(out)
    }

    /// Replaces the hidden activation, leaving every weight untouched.
    pub fn with_activation(&self, activation: Activation) -> Model {
        let mut m = self.clone();
        m.spec.activation = activation;
        m
    }

    pub fn is_vit(&self) -> bool {
        matches!(self.spec.arch, Architecture::Vit(_))
    }
}

impl Classifier for Model {
    fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>, guided: bool) -> Result<Var<'g>> {
        let params = self.bind(g);
        Ok(self.forward_with(&params, x, guided)?.logits)
    }
}

impl AttentionClassifier for Model {
    fn logits_and_attention<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Vec<Vec<Var<'g>>>)> {
        if !self.is_vit() {
            return Err(Error::Contract("attention maps requested from an MLP".into()));
        }
        let params = self.bind(g);
        let mut f = self.forward_with(&params, x, false)?;
        let att = f.attention.pop().unwrap_or_default();
        Ok((f.logits, att))
    }

    fn attention_kind(&self) -> AttentionKind {
        match &self.spec.arch {
            Architecture::Vit(v) => v.attention,
            Architecture::Mlp { .. } => AttentionKind::Softmax,
        }
    }
}
