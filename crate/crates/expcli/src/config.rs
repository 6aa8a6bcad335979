//! TOML sweep configuration and its content hash.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icrlab::attack::AttackConfig;
use icrlab::attribution::GradientMethod;
use icrlab::models::{Activation, Architecture, ModelSpec};
use icrlab::training::{ProbeSpec, Strategy, TrainConfig, DEFAULT_DECAY};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx, make_blobs, Dataset};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
        /// Reshape each point to a one-channel `side x side` image.
        #[serde(default)]
        image_side: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
        /// Number of classes; the largest label plus one when absent.
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub stop_loss_threshold: f64,
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Emit comparison rows only for runs that reached the loss threshold.
    #[serde(default = "yes")]
    pub require_threshold: bool,
    #[serde(default)]
    pub probe_every: Option<usize>,
    #[serde(default = "default_probe_points")]
    pub probe_points: usize,
}

fn default_decay() -> f64 {
    DEFAULT_DECAY
}

fn yes() -> bool {
    true
}

fn default_probe_points() -> usize {
    8
}

/// Attribution method probed by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProbeMethod {
    Gradient(GradientMethod),
    Attention,
}

impl FromStr for ProbeMethod {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => ProbeMethod::Gradient(GradientMethod::Vanilla),
            "input_x_grad" => ProbeMethod::Gradient(GradientMethod::InputXGrad),
            "integrated_gradients" => ProbeMethod::Gradient(GradientMethod::integrated_gradients()),
            "guided_backprop" => ProbeMethod::Gradient(GradientMethod::GuidedBackprop),
            "attention" => ProbeMethod::Attention,
            other => return Err(CliError::Config(format!("unknown attribution method `{other}`"))),
        })
    }
}

impl TryFrom<String> for ProbeMethod {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProbeMethod> for String {
    fn from(m: ProbeMethod) -> String {
        m.to_string()
    }
}

impl fmt::Display for ProbeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeMethod::Gradient(g) => write!(f, "{g}"),
            ProbeMethod::Attention => f.write_str("attention"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<ProbeMethod>,
    /// Leading validation points attacked per run.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "AttackConfig::gradient_default")]
    pub gradient: AttackConfig,
    #[serde(default = "AttackConfig::attention_default")]
    pub attention: AttackConfig,
}

fn default_methods() -> Vec<ProbeMethod> {
    vec![ProbeMethod::Gradient(GradientMethod::Vanilla)]
}

fn default_samples() -> usize {
    100
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            methods: default_methods(),
            samples: default_samples(),
            layer: 0,
            gradient: AttackConfig::gradient_default(),
            attention: AttackConfig::attention_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Validation points for the input-Hessian and SNR probes.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Training points averaged in the parameter GN trace.
    #[serde(default = "default_trace_samples")]
    pub trace_samples: usize,
}

fn default_trace_samples() -> usize {
    32
}

impl Default for CurvatureSection {
    fn default() -> Self {
        CurvatureSection { enabled: true, samples: default_samples(), trace_samples: default_trace_samples() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub name: String,
    pub seeds: Vec<u64>,
    pub learning_rates: Vec<f64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub curvature: CurvatureSection,
    #[serde(rename = "strategy", default)]
    pub strategies: Vec<Strategy>,
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.learning_rates.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Config("nothing to run".into()));
        }
        for s in &self.strategies {
            for &lr in &self.learning_rates {
                self.train_config(*s, lr, 0).validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        self.attack.gradient.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.attack.attention.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Stable digest of the normalized configuration (16 hex digits of SHA-256).
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self, strategy: Strategy, lr: f64, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            base_lr: lr,
            decay_factor: t.decay_factor,
            strategy,
            stop_loss_threshold: t.stop_loss_threshold,
            warmup_epochs: t.warmup_epochs,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            seed,
            probe: t.probe_every.map(|every| ProbeSpec { every, samples: t.probe_points }),
        }
    }

    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        ModelSpec {
            arch: self.model.arch.clone(),
            input_dims: data.input_dims.clone(),
            num_classes: data.num_classes,
            activation: self.model.activation,
        }
    }

    /// Builds the dataset; `limit` caps the number of rows read.
    pub fn dataset(&self, limit: Option<usize>) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Blobs { n_per_class, classes, dim, spread, seed, image_side } => {
                let n = limit.map_or(*n_per_class, |l| (l / classes).max(1).min(*n_per_class));
                let (mut data, _) = make_blobs(n, *classes, *dim, *spread, *seed)?;
                match (image_side, &self.model.arch) {
                    (Some(side), Architecture::Vit(_)) if side * side == *dim => data.input_dims = vec![1, *side, *side],
                    (_, Architecture::Vit(_)) => {
                        return Err(CliError::Config(format!("a ViT needs image_side with image_side² = dim ({dim})")));
                    }
                    _ => {}
                }
                Ok(data)
            }
            DatasetConfig::Idx { images, labels, limit: cfg_limit, val_fraction, seed, classes } => {
                let cap = match (limit, cfg_limit) {
                    (Some(a), Some(b)) => Some(a.min(*b)),
                    (a, b) => a.or(*b),
                };
                let (all, dims) = load_idx(images, labels, cap)?;
                let classes = classes.unwrap_or_else(|| all.labels.iter().max().map_or(1, |m| m + 1));
                let flat = if matches!(self.model.arch, Architecture::Vit(_)) { dims } else { vec![all.dim()] };
                Dataset::split(&all, classes, flat, *val_fraction, *seed)
            }
        }
    }
}
