use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Classifier,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Classifier => "classifier",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(ParamGroup::Backbone),
            "classifier" => Ok(ParamGroup::Classifier),
            other => Err(Error::Config(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Multiplier applied to the base learning rate; always positive.
    pub lr_mult: f64,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Learning rates of the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub classifier: f64,
}

/// Backbone keeps `base_lr`, the classifier head gets `base_lr / ratio`.
pub fn group_learning_rates(base_lr: f64, ratio: f64) -> Result<GroupRates> {
    if !(ratio > 0.0) {
        return Err(Error::Config(format!("learning-rate ratio must be positive, got {ratio}")));
    }
    Ok(GroupRates { backbone: base_lr, classifier: base_lr / ratio })
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.push(Param { name: name.into(), value, group, lr_mult: 1.0 });
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        if let Some(p) = params.iter().find(|p| !(p.lr_mult > 0.0)) {
            return Err(Error::Config(format!("non-positive lr multiplier on {}", p.name)));
        }
        Ok(ParamSet { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets the classifier multiplier to `1 / ratio` and the backbone to 1.
    pub fn set_group_ratio(&mut self, ratio: f64) -> Result<()> {
        let rates = group_learning_rates(1.0, ratio)?;
        for p in &mut self.params {
            p.lr_mult = match p.group {
                ParamGroup::Backbone => rates.backbone,
                ParamGroup::Classifier => rates.classifier,
            };
        }
        Ok(())
    }

    /// Multiplier for a group label given as text.
    pub fn group_multiplier(&self, label: &str) -> Result<f64> {
        let group: ParamGroup = label.parse()?;
        Ok(self.params.iter().find(|p| p.group == group).map_or(1.0, |p| p.lr_mult))
    }

    /// All parameters concatenated into one vector.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            data.extend_from_slice(p.value.data());
        }
        Tensor::vector(data)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_flat(&self, flat: &Tensor) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_scalars())));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for p in &mut out.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Splits a flat graph vector into per-parameter nodes shaped like this set.
    pub fn unflatten<'g>(&self, flat: Var<'g>) -> Result<Vec<Var<'g>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.len();
            let idx = std::rc::Rc::new((offset..offset + n).collect::<Vec<_>>());
            out.push(flat.gather(idx, p.value.shape())?);
            offset += n;
        }
        Ok(out)
    }

    /// Binds the flattened parameters as a single leaf and returns it with the
    /// per-parameter views.
    pub fn bind_flat<'g>(&self, g: &'g Graph) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let flat = g.leaf(self.flatten());
        let views = self.unflatten(flat)?;
        Ok((flat, views))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_ten_splits_rates() {
        let r = group_learning_rates(0.1, 10.0).unwrap();
        assert_eq!(r.backbone, 0.1);
        assert!((r.classifier - 0.01).abs() < 1e-18);
        let r = group_learning_rates(0.1, 1.0).unwrap();
        assert_eq!(r.backbone, r.classifier);
        assert!(group_learning_rates(0.1, 0.0).is_err());
    }

    #[test]
    fn unknown_group_label() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::zeros(&[2]), ParamGroup::Classifier);
        ps.set_group_ratio(4.0).unwrap();
        assert_eq!(ps.group_multiplier("classifier").unwrap(), 0.25);
        assert!(ps.group_multiplier("head").is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), ParamGroup::Backbone);
        ps.push("b", Tensor::vector(vec![5.0]), ParamGroup::Classifier);
        let flat = ps.flatten();
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(ps.with_flat(&flat).unwrap(), ps);
    }
}
