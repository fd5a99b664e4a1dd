use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Which of the three disjoint parameter sets a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Shared convolutional feature extractor.
    Conv,
    /// Class-prediction head.
    Classifier,
    /// Adversarial head behind the gradient reversal layer.
    Regressor,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [GroupKind::Conv, GroupKind::Classifier, GroupKind::Regressor];

    pub fn index(self) -> usize {
        match self {
            GroupKind::Conv => 0,
            GroupKind::Classifier => 1,
            GroupKind::Regressor => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Conv => "conv",
            GroupKind::Classifier => "classifier",
            GroupKind::Regressor => "regressor",
        }
    }
}

/// Named tensors of one parameter set, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// The trainable parameters of the multi-task network, split into the
/// feature extractor, the classifier and the adversarial head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub groups: [ParamGroup; 3],
}

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams;

impl ModelParams {
    pub fn group(&self, kind: GroupKind) -> &ParamGroup {
        &self.groups[kind.index()]
    }

    pub fn group_mut(&mut self, kind: GroupKind) -> &mut ParamGroup {
        &mut self.groups[kind.index()]
    }

    pub fn conv(&self) -> &ParamGroup {
        self.group(GroupKind::Conv)
    }

    pub fn classifier(&self) -> &ParamGroup {
        self.group(GroupKind::Classifier)
    }

    pub fn regressor(&self) -> &ParamGroup {
        self.group(GroupKind::Regressor)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: [
                self.groups[0].zeros_like(),
                self.groups[1].zeros_like(),
                self.groups[2].zeros_like(),
            ],
        }
    }

    pub fn numel(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    /// `(group, name, tensor)` in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (GroupKind, &str, &Tensor)> {
        GroupKind::ALL.into_iter().flat_map(move |k| {
            let g = self.group(k);
            g.names.iter().zip(&g.tensors).map(move |(n, t)| (k, n.as_str(), t))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, _, t)| t.is_finite())
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.numel(), "flat parameter length");
        let mut offset = 0;
        for g in self.groups.iter_mut() {
            for t in g.tensors.iter_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
    }
}
