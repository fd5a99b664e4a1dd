//! The multi-task network: a convolutional feature extractor shared by a
//! class head and an adversarial head that sits behind a gradient reversal
//! layer. The adversarial head either regresses the 6-value stain matrix
//! (sigmoid outputs) or classifies the source center.

use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::RgbPatch;
use crate::error::{Error, Result};
use crate::nn::{GroupKind, Graph, ModelGrads, ModelParams, ParamGroup, Tensor, Var};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// What the head behind the reversal layer predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AuxHead {
    /// Flattened H&E matrix, squashed into (0, 1).
    StainMatrix,
    /// Softmax over source centers.
    Domain { n_domains: usize },
}

impl AuxHead {
    pub fn outputs(&self) -> usize {
        match self {
            AuxHead::StainMatrix => 6,
            AuxHead::Domain { n_domains } => *n_domains,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Side length of the square RGB input.
    pub input_size: usize,
    pub conv: Vec<ConvBlockSpec>,
    /// Width of the hidden layer of both heads.
    pub hidden: usize,
    pub n_classes: usize,
    pub aux: AuxHead,
}

impl ArchSpec {
    /// Three stride-2 3×3 blocks (16, 32, 64 channels) and 128-unit heads.
    pub fn toy(n_classes: usize, input_size: usize) -> Self {
        Self::with_channels(n_classes, input_size, &[16, 32, 64], 128)
    }

    pub fn with_channels(n_classes: usize, input_size: usize, channels: &[usize], hidden: usize) -> Self {
        Self {
            input_size,
            conv: channels
                .iter()
                .map(|&c| ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            hidden,
            n_classes,
            aux: AuxHead::StainMatrix,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.conv.last().map_or(3, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.conv.is_empty() || self.feature_dim() < 8 && self.input_size >= 16 {
            return Err(Error::InvalidConfig(format!(
                "feature dimension must be >= 8, got {}",
                self.feature_dim()
            )));
        }
        if self.hidden == 0 || self.input_size == 0 {
            return Err(Error::InvalidConfig("hidden width and input size must be positive".into()));
        }
        if let AuxHead::Domain { n_domains } = self.aux {
            if n_domains < 2 {
                return Err(Error::SingleDomain(n_domains));
            }
        }
        let mut side = self.input_size;
        for b in &self.conv {
            if b.kernel == 0 || b.stride == 0 || side + 2 * (b.kernel / 2) < b.kernel {
                return Err(Error::InvalidConfig(format!("conv block {b:?} does not fit {side}px")));
            }
            side = (side + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
        }
        Ok(())
    }
}

/// The compared training strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodMode {
    None,
    StainNorm,
    HsvAug,
    StainAug,
    DomainAdv,
    HeAdv,
}

impl MethodMode {
    pub const ALL: [MethodMode; 6] = [
        MethodMode::None,
        MethodMode::StainNorm,
        MethodMode::HsvAug,
        MethodMode::StainAug,
        MethodMode::DomainAdv,
        MethodMode::HeAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodMode::None => "none",
            MethodMode::StainNorm => "stain_norm",
            MethodMode::HsvAug => "hsv_aug",
            MethodMode::StainAug => "stain_aug",
            MethodMode::DomainAdv => "domain_adv",
            MethodMode::HeAdv => "he_adv",
        }
    }

    /// Whether the mode trains the head behind the reversal layer.
    pub fn is_adversarial(self) -> bool {
        matches!(self, MethodMode::DomainAdv | MethodMode::HeAdv)
    }

    /// Default reversal strength for the mode.
    pub fn default_lambda(self) -> f64 {
        match self {
            MethodMode::DomainAdv => 0.5,
            MethodMode::HeAdv => 1.0,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for MethodMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: ModelParams,
}

fn he_tensor(shape: &[usize], fan_in: usize, gain: f64, rng: &mut crate::rng::Rng) -> Tensor {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn head_group(in_dim: usize, hidden: usize, out: usize, rng: &mut crate::rng::Rng) -> ParamGroup {
    let mut g = ParamGroup::default();
    g.push("hidden.weight", he_tensor(&[hidden, in_dim], in_dim, 2.0, rng));
    g.push("hidden.bias", Tensor::zeros(&[hidden]));
    g.push("out.weight", he_tensor(&[out, hidden], hidden, 1.0, rng));
    g.push("out.bias", Tensor::zeros(&[out]));
    g
}

/// He-initialized parameters; a pure function of `(arch, seed)`.
///
/// Groups are drawn in the order extractor, classifier, adversarial head,
/// so two architectures differing only in the head share the first two.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = seeded(seed);
    let mut conv = ParamGroup::default();
    let mut in_c = 3;
    for (i, b) in arch.conv.iter().enumerate() {
        let fan_in = in_c * b.kernel * b.kernel;
        conv.push(
            format!("block{i}.weight"),
            he_tensor(&[b.out_channels, in_c, b.kernel, b.kernel], fan_in, 2.0, &mut rng),
        );
        conv.push(format!("block{i}.bias"), Tensor::zeros(&[b.out_channels]));
        in_c = b.out_channels;
    }
    let f = arch.feature_dim();
    let classifier = head_group(f, arch.hidden, arch.n_classes, &mut rng);
    let regressor = head_group(f, arch.hidden, arch.aux.outputs(), &mut rng);
    Ok(Model {
        arch: arch.clone(),
        params: ModelParams {
            groups: [conv, classifier, regressor],
        },
    })
}

/// Stacks patches into a centered `[N, 3, H, W]` tensor.
pub fn patches_to_tensor(patches: &[&RgbPatch], size: usize) -> Result<Tensor> {
    let plane = size * size;
    let mut data = vec![0.0; patches.len() * 3 * plane];
    for (n, p) in patches.iter().enumerate() {
        if p.width() != size || p.height() != size {
            return Err(Error::ShapeMismatch(format!(
                "model expects {size}x{size} patches, got {}x{}",
                p.width(),
                p.height()
            )));
        }
        let base = n * 3 * plane;
        for (i, px) in p.pixels().iter().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] - 0.5;
            }
        }
    }
    Tensor::new(vec![patches.len(), 3, size, size], data)
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub aux: Option<Var>,
    pub params: [Vec<Var>; 3],
}

/// Target of the adversarial head for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxTarget {
    None,
    /// `[N, 6]` flattened stain matrices.
    Stain(Tensor),
    /// Contiguous domain indices.
    Domain(Vec<usize>),
}

/// Per-batch losses; `total = classification + λ · adversarial`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub classification: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl Model {
    /// Records a forward pass. `aux_lambda = Some(λ)` also evaluates the
    /// adversarial head behind a reversal layer of strength λ.
    pub fn forward(&self, g: &mut Graph, input: Tensor, aux_lambda: Option<f64>) -> Result<ForwardVars> {
        let mut params: [Vec<Var>; 3] = Default::default();
        for kind in GroupKind::ALL {
            for t in &self.params.group(kind).tensors {
                params[kind.index()].push(g.leaf(t.clone())?);
            }
        }
        let mut h = g.leaf(input)?;
        for (i, b) in self.arch.conv.iter().enumerate() {
            let (w, bias) = (params[0][2 * i], params[0][2 * i + 1]);
            h = g.conv2d(h, w, bias, b.stride, b.kernel / 2)?;
            h = g.relu(h);
        }
        let features = g.global_avg_pool(h)?;

        let head = |g: &mut Graph, x: Var, p: &[Var]| -> Result<Var> {
            let z = g.dense(x, p[0], Some(p[1]))?;
            let z = g.relu(z);
            g.dense(z, p[2], Some(p[3]))
        };
        let logits = head(g, features, &params[1])?;
        let aux = match aux_lambda {
            None => None,
            Some(lambda) => {
                let rev = g.grad_reverse(features, lambda)?;
                let out = head(g, rev, &params[2])?;
                Some(match self.arch.aux {
                    AuxHead::StainMatrix => g.sigmoid(out),
                    AuxHead::Domain { .. } => out,
                })
            }
        };
        Ok(ForwardVars {
            features,
            logits,
            aux,
            params,
        })
    }

    /// One combined backward pass over `Loss_cl + Loss_r` where the reversal
    /// layer folds `−λ` into the extractor's share of `Loss_r`.
    pub fn compute_gradients(
        &self,
        input: Tensor,
        labels: &[usize],
        aux: &AuxTarget,
        lambda: f64,
    ) -> Result<(BatchLoss, ModelGrads)> {
        let mut g = Graph::new();
        let with_aux = !matches!(aux, AuxTarget::None);
        let fv = self.forward(&mut g, input, with_aux.then_some(lambda))?;
        let cl = g.cross_entropy(fv.logits, labels)?;
        let (root, adv) = match (aux, fv.aux) {
            (AuxTarget::None, _) | (_, None) => (cl, 0.0),
            (AuxTarget::Stain(target), Some(pred)) => {
                let r = g.squared_l2(pred, target)?;
                (g.add(cl, r)?, g.value(r).item())
            }
            (AuxTarget::Domain(ids), Some(pred)) => {
                let r = g.cross_entropy(pred, ids)?;
                (g.add(cl, r)?, g.value(r).item())
            }
        };
        let classification = g.value(cl).item();
        let grads = g.backward(root)?;
        let mut out = self.params.zeros_like();
        for kind in GroupKind::ALL {
            let k = kind.index();
            for (slot, (&v, t)) in out.groups[k]
                .tensors
                .iter_mut()
                .zip(fv.params[k].iter().zip(&self.params.groups[k].tensors))
            {
                *slot = grads.get_or_zeros(v, t);
            }
        }
        Ok((
            BatchLoss {
                classification,
                adversarial: adv,
                total: classification + lambda * adv,
            },
            out,
        ))
    }

    /// Features and class logits for a batch (no adversarial head).
    pub fn infer(&self, patches: &[&RgbPatch]) -> Result<(Tensor, Tensor)> {
        let input = patches_to_tensor(patches, self.arch.input_size)?;
        let mut g = Graph::new();
        let fv = self.forward(&mut g, input, None)?;
        Ok((g.value(fv.features).clone(), g.value(fv.logits).clone()))
    }

    /// Class probabilities of one patch.
    pub fn predict(&self, patch: &RgbPatch) -> Result<Vec<f64>> {
        let (_, logits) = self.infer(&[patch])?;
        Ok(crate::nn::ops::softmax(&logits)?.into_data())
    }

    /// Feature vector (`feature_dim` values) of one patch.
    pub fn extract_features(&self, patch: &RgbPatch) -> Result<Vec<f64>> {
        Ok(self.infer(&[patch])?.0.into_data())
    }

    /// Adversarial-head output for a batch.
    pub fn aux_output(&self, patches: &[&RgbPatch]) -> Result<Tensor> {
        let input = patches_to_tensor(patches, self.arch.input_size)?;
        let mut g = Graph::new();
        let fv = self.forward(&mut g, input, Some(0.0))?;
        Ok(g.value(fv.aux.expect("aux head requested")).clone())
    }
}
